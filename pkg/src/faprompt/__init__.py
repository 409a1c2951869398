"""Zero-shot anomaly detection with compound abnormality prompts and a data-dependent prior."""
from .backbone import BackboneConfig, ImageEncoding, ToyBackbone, build_backbone
from .cap import PromptBank, PromptEmbeddings, assemble_prompts, encode_prompt_bank, orthogonality_loss
from .checkpoint import Checkpoint
from .dap import AbnormalityPrior, PriorNetwork, compute_prior, patch_scores, prior_loss, select_top_patches
from .data import DatasetHandle, Sample, load_dataset, synth_dataset
from .errors import ConfigError, FAPromptError, IngestionError, TrainingError, UndefinedMetricError, ValidationError
from .losses import LossBreakdown, dice_loss, focal_loss, global_loss, local_loss, total_loss
from .metrics import EvalReport, auroc, average_precision, pro
from .scoring import ScoreBundle, final_score, gaussian_smooth, image_probability, inference_map, to_segmentation_map
from .training import FAPrompt, TrainConfig, model_forward, train

__version__ = "0.1.0"

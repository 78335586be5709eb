"""Class-incremental learning with expanding representations and alternating objectives."""
from .data import IncrementalStream, LabeledSamples, SkewSpec, generate_skewed, ingest, make_stream
from .errors import ICLError
from .herding import BACKEND as HERDING_BACKEND, herding_select
from .losses import LossConfig
from .metrics import AccuracyMatrix, acc_new_old, forgetting, overall_acc, summarize
from .model import BackboneSpec, ExpandingNet, Phase, load_checkpoint, save_checkpoint
from .trainer import Learner, TrainPlan, run_ablation, run_stream

__version__ = "0.1.0"

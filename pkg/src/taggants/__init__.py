"""Dataset ownership verification for audio classifiers with data taggants."""

from .audio_dsp import AudioClip, MelMatrix, SpectroConfig
from .crafting import CraftConfig, craft
from .desk import make_desk_dataset
from .dataset import LabeledDataset, PerturbationSet, PoisonPlan, ingest, export_protected, select_poison_set
from .keygen import KeyGenConfig, KeySet, generate_keyset
from .model import ModelParams, TopKOracle, TrainConfig, predict_topk, train
from .verify import VerificationReport, binomial_pvalue, decide, fisher_combine, topk_key_accuracy, verify

__version__ = "0.1.0"

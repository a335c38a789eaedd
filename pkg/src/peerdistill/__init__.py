"""Cross-subject fNIRS emotion decoding with jointly trained peer networks.

A cohort of peers (CNN+LSTM or transformer extractors) trains together:
label-smoothed classification, mutual distillation on softened outputs and
a cross-peer supervised contrastive loss on both embedding levels. Only the
best peer ships; projection heads and the rest of the cohort are training
scaffolding.
"""

from .data import (FnirsDataset, FnirsRecord, SplitPlan, SynthConfig,
                   generate_synthetic, load_dataset, make_subject_folds,
                   plan_balanced_batches, save_dataset)
from .errors import (ConfigError, FormatError, IntegrityError, NumericError,
                     PeerDistillError, ValidationError)
from .losses import (LossBreakdown, LossWeights, combine_losses,
                     contrastive_loss, contrastive_pair_loss, cross_entropy_loss,
                     distillation_kl, soften_logits, soften_onehot)
from .metrics import (CompressionReport, aggregate_folds, analytic_flops,
                      analytic_macs, compression_report, export_embeddings,
                      load_embeddings, render_report, render_sweep_report)
from .models import (PeerConfig, PeerEnsemble, PeerNet, build_ensemble,
                     build_peer, count_params, load_peer, save_peer,
                     select_best_peer)
from .trainer import (EpochLog, FoldResult, ProtocolResult, TrainConfig,
                      checkpoint_resume, checkpoint_save, evaluate,
                      run_protocol, sweep_peer_counts, train)
from .config import RunConfig

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

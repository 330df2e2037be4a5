"""Key-based model protection by block-wise pixel shuffling."""
from .blockshuffle import (ShuffleConfig, block_vector_index, read_ppm, shuffle_batch, shuffle_image,
                           unshuffle_batch, unshuffle_image, write_ppm)
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import (AugmentConfig, LabeledDataset, augment, load_cifar10, sample_subset,
                     synthetic_cifar10)
from .keycore import (Permutation, SecretKey, derive_permutation, generate_key, invert,
                      key_space_size, load_key, save_key)
from .nettrain import (REFERENCE_ARCH, Model, OptimState, backward, cross_entropy, cyclic_lr,
                       forward, grad_check, sgd_step)
from .protect import (ProtectionConfig, evaluate, finetune_attack, run_protocol, train_protected,
                      wrong_key_sweep)
from .report import ProtectionReport, render_report

__version__ = "0.1.0"

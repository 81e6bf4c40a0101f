"""snapleak: model-inversion and membership-inference attacks that exploit
training snapshots of biometric-style networks, at desk scale.

The pipeline mirrors the attack surface: ingest a corpus (`dataset`), train a
target and capture snapshots under a leakage scenario (`target_models`), turn
snapshot outputs into attack-model inputs (`incorporation`), train the
inversion GAN (`inversion`) or the membership attacker (`membership`), and
score everything with FAR-calibrated metrics (`evaluation`). `harness` wires
the stages into reproducible, content-addressed experiment runs.
"""

from .dataset import (DatasetDescriptor, DatasetSplit, ImageSample, IngestError, blur_sample,
                      gaussian_blur, gaussian_kernel2d, load_corpus, split_classification,
                      split_feature_extraction)
from .evaluation import (EvalReport, Threshold, calibration_impostor_distances,
                         classifier_inversion_accuracy, compute_far_threshold, l2_distance,
                         mi_accuracy, rank1_accuracy, snapshot_ablation, type1_accuracy)
from .harness import ExperimentConfig, RunResult, SyntheticSpec, render_report, run_experiment
from .incorporation import (AugmentedVector, VectorTuple, build_vector_bank, load_bank,
                            make_concat, make_rand, make_structured_random, make_test_input,
                            save_bank)
from .inversion import (AttackConfig, Generator, InversionDiverged, LossBundle, PerceptualNet,
                        alignment_loss, discriminator_loss, generator_adversarial_loss,
                        invert, invert_averaged, invert_batch, load_generator,
                        reconstruction_losses, save_generator, total_generator_loss,
                        train_inversion, train_perceptual_net)
from .membership import (MIAttacker, MIConfig, MIDataset, build_mi_dataset, infer_membership,
                         load_mi_attacker, load_mi_dataset, save_mi_attacker, save_mi_dataset,
                         train_mi)
from .ssim import ssim_index
from .target_models import (SnapshotSet, TargetModel, TrainConfig, TrainingDiverged,
                            load_snapshot_set, query, run_downslope_scenario,
                            run_update_scenario, save_snapshot_set, train_with_snapshots)
from .toydata import make_texture_corpus, write_corpus

__version__ = "0.1.0"

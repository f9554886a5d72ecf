"""Learning checks on phantom data: pretraining lowers its loss and helps downstream tasks."""

import pytest

from src.adapt import FewShotPlan, FinetuneConfig, HeadSpec, finetune, predict_dataset, run_few_shot
from src.config import RunConfig
from src.encoder import build_encoder
from src.evalstat import ScoredSet, auc
from src.ingest import EvalDataset
from src.ssl_dino import pretrain_dino
from src.ssl_mae import pretrain_mae
from src.volume_store import generate_phantoms

pytestmark = pytest.mark.slow

TASK = "bright_lesion"

LEARNING_OVERRIDES = {
    "seed": 0,
    "windows": "brain",
    "phantom": {"dims": [32, 32, 32], "blob_radius_range": [3, 5]},
    "crop": {
        "pad_crop_target": [32, 32, 32],
        "eval_center_crop": [32, 32, 32],
        "model_input": [16, 16, 16],
        "global_scale_range": [16, 32],
        "local_scale_range": [8, 16],
    },
    "encoder": {
        "input_dims": [16, 16, 16],
        "channels": 1,
        "patch_size": 4,
        "embed_dim": 48,
        "depth": 2,
        "heads": 4,
        "mlp_hidden": 96,
    },
    "dino": {
        "proj_hidden_dim": 64,
        "proj_bottleneck_dim": 32,
        "prototype_count": 64,
        "warmup_teacher_temp_epochs": 0,
        "warmup_epochs": 1,
        "total_epochs": 5,
        "batch_size": 16,
        "checkpoint_every": 5,
    },
    "mae": {"decoder_dim": 24, "decoder_depth": 1, "decoder_heads": 2, "total_epochs": 5, "batch_size": 16,
            "checkpoint_every": 5},
}


@pytest.fixture(scope="module")
def run_cfg():
    """Small encoder over 16^3 inputs cut from 32^3 phantoms."""
    return RunConfig.for_profile("desk", LEARNING_OVERRIDES)


@pytest.fixture(scope="module")
def phantoms(run_cfg, tmp_path_factory):
    """Two hundred phantoms with group splits."""
    return generate_phantoms(run_cfg.phantom, 200, run_cfg.seed, tmp_path_factory.mktemp("phantoms"))


@pytest.fixture(scope="module")
def dino_run(run_cfg, phantoms, tmp_path_factory):
    """Five DINO epochs."""
    return pretrain_dino(phantoms, run_cfg, tmp_path_factory.mktemp("dino"))


@pytest.fixture(scope="module")
def mae_run(run_cfg, phantoms, tmp_path_factory):
    """Five MAE epochs."""
    return pretrain_mae(phantoms, run_cfg, tmp_path_factory.mktemp("mae"))


def _test_auc(classifier, manifest, run_cfg):
    dataset = EvalDataset(manifest, run_cfg.windows, run_cfg.crop, indices=manifest.split_indices("test"), task=TASK,
                          seed=run_cfg.seed, resample_method=run_cfg.resample_method,
                          resize_method=run_cfg.resize_method)
    ids, scores, labels = predict_dataset(classifier, dataset)
    return auc(ScoredSet(ids, scores, labels))


def _adapted_auc(encoder, manifest, run_cfg, mode):
    cfg = FinetuneConfig(mode=mode, max_epochs=5, epoch_samples=64, batch_size=16, augment_enabled=False)
    result = finetune(encoder, manifest, TASK, cfg, HeadSpec(), run_cfg, seed=0)
    return _test_auc(result.classifier, manifest, run_cfg)


class TestPretrainingLoss:
    """Test pretraining objectives go down."""

    def test_dino_loss_falls(self, dino_run):
        """Test the fifth DINO epoch ends below the first."""
        assert len(dino_run.epoch_losses) == 5
        assert dino_run.epoch_losses[-1] < dino_run.epoch_losses[0]

    def test_mae_loss_falls(self, mae_run):
        """Test the fifth MAE epoch ends below the first."""
        assert len(mae_run.epoch_losses) == 5
        assert mae_run.epoch_losses[-1] < mae_run.epoch_losses[0]


class TestDownstream:
    """Test pretrained encoders against random ones."""

    def test_dino_linear_head(self, dino_run, phantoms, run_cfg):
        """Test a frozen DINO encoder reaches AUC 0.85 and beats a frozen random encoder by 0.10."""
        pretrained = _adapted_auc(dino_run.encoder_path, phantoms, run_cfg, "probe")
        random_init = _adapted_auc(build_encoder(run_cfg.encoder, run_cfg.seed), phantoms, run_cfg, "probe")
        assert pretrained >= 0.85
        assert pretrained >= random_init + 0.10

    def test_mae_linear_head(self, mae_run, phantoms, run_cfg):
        """Test a frozen MAE encoder reaches AUC 0.80 and beats a frozen random encoder by 0.10."""
        pretrained = _adapted_auc(mae_run.encoder_path, phantoms, run_cfg, "probe")
        random_init = _adapted_auc(build_encoder(run_cfg.encoder, run_cfg.seed), phantoms, run_cfg, "probe")
        assert pretrained >= 0.80
        assert pretrained >= random_init + 0.10

    def test_finetune_from_pretrained(self, dino_run, phantoms, run_cfg):
        """Test full fine-tuning from DINO weights is no worse than from scratch."""
        pretrained = _adapted_auc(dino_run.encoder_path, phantoms, run_cfg, "full")
        scratch = _adapted_auc(build_encoder(run_cfg.encoder, run_cfg.seed), phantoms, run_cfg, "full")
        assert pretrained >= scratch

    def test_few_shot_improves_with_k(self, dino_run, phantoms, run_cfg, tmp_path):
        """Test mean few-shot test AUC does not drop as K grows."""
        cfg = FinetuneConfig(mode="probe", max_epochs=5, epoch_samples=32, batch_size=16, augment_enabled=False)
        plan = FewShotPlan(ks=(2, 8, 32), repeats=3)
        result = run_few_shot(dino_run.encoder_path, phantoms, TASK, plan, cfg, HeadSpec(), run_cfg, 0, tmp_path)
        means = [result.aggregate[k]["mean"] for k in plan.ks]
        assert means == sorted(means)

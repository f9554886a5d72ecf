"""CLI entry point for voxel-fm."""

import contextlib
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import click
import numpy as np
import torch

from src import __version__
from src.adapt import (
    FewShotPlan,
    embed_volumes,
    finetune,
    predict_dataset,
    read_scores,
    run_few_shot,
    save_classifier,
    sweep_scratch,
    write_scores,
)
from src.checkpoint import load_encoder
from src.config import RunConfig, deep_merge, threads_from_env
from src.encoder import attention_cost_estimate, compare_patch_sizes
from src.evalstat import (
    ScoredSet,
    agreement_stats,
    auc,
    bootstrap_ci,
    metric_by_name,
    paired_permutation_test,
)
from src.ingest import EvalDataset
from src.interpret import (
    attention_distance_map,
    attention_stack_from_embeddings,
    export_heatmap,
    save_distance_map_json,
)
from src.report import ReportGenerator, list_artifacts
from src.retrieval import (
    evaluate_retrieval,
    export_embedding_parquet,
    load_embedding_set,
    save_embedding_set,
)
from src.ssl_dino import pretrain_dino
from src.ssl_mae import pretrain_mae
from src.utils.constants import (
    ATTENTION_REDUCTIONS,
    DEFAULT_PROFILE,
    GALLERY_MODES,
    HEAD_KINDS,
    LOG_LEVELS,
    POOLINGS,
    PROFILES,
    SPLITS,
)
from src.utils.errors import CLIError, MetricError, VoxfmException
from src.utils.logger import set_package_level, setup_logger
from src.utils.seeding import configure_determinism, seed_everything
from src.volume_store import Manifest, generate_phantoms, load_manifest, save_volume

logger = setup_logger(__name__)

RUN_MANIFEST_NAME = "run_manifest.json"


def describe_version() -> str:
    """``git describe`` of the working tree, else the package version."""
    try:
        described = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            capture_output=True,
            text=True,
            check=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        described = ""
    return described or f"v{__version__}"


def effective_config(options: Dict[str, Any]) -> RunConfig:
    """Profile defaults, then the YAML file, then command-line flags."""
    if options.get("config_path"):
        cfg = RunConfig.from_yaml(options["config_path"], options.get("profile"))
    else:
        cfg = RunConfig.for_profile(options.get("profile") or DEFAULT_PROFILE)

    flags = {
        key: options[key]
        for key in ("seed", "deterministic", "log_level")
        if options.get(key) is not None
    }
    if flags:
        cfg = RunConfig.for_profile(cfg.profile, deep_merge(cfg.to_dict(), flags))
    return cfg


@dataclass
class VerbRun:
    """State of one verb invocation and the artifacts it produced."""

    verb: str
    out_dir: Path
    cfg: Optional[RunConfig] = None
    artifacts: List[Path] = field(default_factory=list)
    started: float = field(default_factory=time.perf_counter)

    @property
    def config(self) -> RunConfig:
        if self.cfg is None:
            raise CLIError("Configuration was not loaded")
        return self.cfg

    def add(self, *paths: Union[str, Path]) -> None:
        self.artifacts.extend(Path(p) for p in paths)

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        path = ReportGenerator.write_json(
            payload, self.out_dir / name, seed=self.config.seed, config_hash=self.config.config_hash()
        )
        self.add(path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = ReportGenerator.export_report(text, self.out_dir / name)
        self.add(path)
        return path

    def finish(self, status: str, error: Optional[str] = None) -> Path:
        """Write the run manifest."""
        payload = {
            "verb": self.verb,
            "status": status,
            "effective_config": self.cfg.to_dict() if self.cfg else None,
            "config_hash": self.cfg.config_hash() if self.cfg else None,
            "seed": self.cfg.seed if self.cfg else None,
            "version": describe_version(),
            "wall_time_s": round(time.perf_counter() - self.started, 3),
            "artifacts": list_artifacts(self.artifacts, self.out_dir),
            "error": error,
        }
        return ReportGenerator.write_json(payload, self.out_dir / RUN_MANIFEST_NAME)


@contextlib.contextmanager
def run_verb(ctx: click.Context, verb: str) -> Iterator[VerbRun]:
    """
    Load the effective config, seed everything and record the run.

    Any error marks the run manifest incomplete and exits with status 1.
    """
    options = ctx.obj or {}
    out_option = options.get("out_dir")
    run = VerbRun(verb=verb, out_dir=Path(out_option) if out_option else Path("runs") / verb)
    try:
        run.cfg = effective_config(options)
        if not out_option:
            run.out_dir = run.cfg.output_dir / verb
        run.out_dir.mkdir(parents=True, exist_ok=True)
        set_package_level(run.cfg.log_level)
        seed_everything(run.cfg.seed)
        configure_determinism(run.cfg.deterministic, threads_from_env())
        logger.info(f"{verb}: profile={run.cfg.profile} seed={run.cfg.seed} out={run.out_dir}")
        yield run
        run.finish("complete")
    except VoxfmException as e:
        _fail(run, str(e))
    except Exception as e:
        logger.exception(f"{verb} failed")
        _fail(run, f"{type(e).__name__}: {e}")


def _fail(run: VerbRun, message: str) -> None:
    try:
        run.out_dir.mkdir(parents=True, exist_ok=True)
        run.finish("incomplete", message)
    except (VoxfmException, OSError) as e:
        logger.error(f"Could not write run manifest: {e}")
    click.echo(f"Error: {message}", err=True)
    sys.exit(1)


def _manifest(run: VerbRun, manifest_path: Optional[str]) -> Manifest:
    path = manifest_path or run.config.manifest
    if path is None:
        raise CLIError(f"'{run.verb}' needs a manifest (--manifest or 'manifest' in the config)")
    if not Path(path).exists():
        raise CLIError(f"Manifest not found: {path}")
    return load_manifest(path)


def _require_file(path: str, what: str) -> Path:
    if not Path(path).exists():
        raise CLIError(f"{what} not found: {path}")
    return Path(path)


def _parse_ints(text: str, what: str) -> Tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise CLIError(f"{what} must be a comma-separated list of integers, got '{text}'")
    if not values:
        raise CLIError(f"{what} must not be empty")
    return values


def _eval_dataset(run: VerbRun, manifest: Manifest, indices: List[int], task: Optional[str] = None) -> EvalDataset:
    cfg = run.config
    return EvalDataset(
        manifest,
        cfg.windows,
        cfg.crop,
        indices=indices,
        task=task,
        seed=cfg.seed,
        resample_method=cfg.resample_method,
        resize_method=cfg.resize_method,
    )


manifest_option = click.option("--manifest", "manifest_path", default=None, help="Dataset manifest (JSONL)")
encoder_option = click.option("--encoder", "encoder_path", required=True, help="Encoder checkpoint")
task_option = click.option("--task", required=True, help="Manifest task name")


@click.group()
@click.option("--config", "config_path", default=None, help="YAML run configuration")
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default=None, help="Default profile")
@click.option("--seed", type=int, default=None, help="Run seed")
@click.option("--deterministic/--no-deterministic", default=None, help="Bitwise-reproducible mode")
@click.option("--out", "out_dir", default=None, help="Output directory (default: <output_dir>/<verb>)")
@click.option("--log-level", type=click.Choice(sorted(LOG_LEVELS)), default=None, help="Log level")
@click.version_option(__version__)
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Optional[str],
    profile: Optional[str],
    seed: Optional[int],
    deterministic: Optional[bool],
    out_dir: Optional[str],
    log_level: Optional[str],
) -> None:
    """voxel-fm: self-supervised 3D volume encoders, adaptation and evaluation."""
    ctx.ensure_object(dict)
    ctx.obj.update(
        config_path=config_path,
        profile=profile,
        seed=seed,
        deterministic=deterministic,
        out_dir=out_dir,
        log_level=log_level,
    )


@cli.command()
@click.option("--n", "n_volumes", type=int, default=200, show_default=True, help="Number of volumes")
@click.pass_context
def phantom(ctx: click.Context, n_volumes: int) -> None:
    """Generate a synthetic phantom dataset and its manifest."""
    with run_verb(ctx, "phantom") as run:
        spec = run.config.phantom
        manifest = generate_phantoms(spec, n_volumes, run.config.seed, run.out_dir)
        run.add(run.out_dir / "manifest.jsonl", *(manifest.resolve_path(r) for r in manifest.records))

        observed = {t: float(manifest.labels_for(t).mean()) for t in manifest.tasks}
        implied = {t: spec.implied_prevalence(t) for t in manifest.tasks}
        splits = {s: len(manifest.split_indices(s)) for s in SPLITS}
        run.write_json("prevalence.json", {"n": n_volumes, "observed": observed, "implied": implied, "splits": splits})
        text = ReportGenerator.generate_prevalence_report(observed, implied, n_volumes)
        run.write_text("prevalence.txt", text)
        click.echo(text)


def _pretrain(ctx: click.Context, verb: str, manifest_path: Optional[str]) -> None:
    with run_verb(ctx, verb) as run:
        manifest = _manifest(run, manifest_path)
        trainer = pretrain_dino if verb == "pretrain-dino" else pretrain_mae
        result = trainer(manifest, run.config, run.out_dir)
        run.add(result.encoder_path, result.log_path, *result.checkpoints)
        if (run.out_dir / "reconstruction_metrics.json").exists():
            run.add(run.out_dir / "reconstruction_metrics.json")
        run.add(*sorted((run.out_dir / "previews").glob("*")))

        run.write_json(
            "pretrain_report.json",
            {"verb": verb, "epoch_losses": result.epoch_losses, "encoder_hash": result.final_hash},
        )
        text = ReportGenerator.generate_training_report(verb, result.epoch_losses, time.perf_counter() - run.started)
        run.write_text("pretrain_report.txt", text)
        click.echo(text)


@cli.command("pretrain-dino")
@manifest_option
@click.pass_context
def pretrain_dino_cmd(ctx: click.Context, manifest_path: Optional[str]) -> None:
    """Self-distillation pretraining of the encoder."""
    _pretrain(ctx, "pretrain-dino", manifest_path)


@cli.command("pretrain-mae")
@manifest_option
@click.pass_context
def pretrain_mae_cmd(ctx: click.Context, manifest_path: Optional[str]) -> None:
    """Masked-autoencoder pretraining of the encoder."""
    _pretrain(ctx, "pretrain-mae", manifest_path)


def _adapt(
    ctx: click.Context,
    verb: str,
    mode: str,
    task: str,
    encoder_path: str,
    manifest_path: Optional[str],
    head_kind: Optional[str],
) -> None:
    with run_verb(ctx, verb) as run:
        cfg = run.config
        manifest = _manifest(run, manifest_path)
        encoder = load_encoder(_require_file(encoder_path, "Encoder checkpoint"))
        ft_cfg = cfg.finetune.model_copy(update={"mode": mode})
        head = cfg.head.model_copy(update={"kind": head_kind}) if head_kind else cfg.head

        result = finetune(encoder, manifest, task, ft_cfg, head, cfg, cfg.seed)
        meta = {"task": task, "mode": mode, "seed": cfg.seed, "best_epoch": result.best_epoch}
        run.add(save_classifier(run.out_dir / "classifier.ckpt", result.classifier, meta=meta))

        payload: Dict[str, Any] = {"task": task, "mode": mode, "head": head.model_dump(), **result.to_dict()}
        test_idx = manifest.split_indices("test")
        payload["test_auc"] = None
        if test_idx:
            ids, scores, labels = predict_dataset(result.classifier, _eval_dataset(run, manifest, test_idx, task),
                                                  ft_cfg.batch_size)
            run.add(write_scores(run.out_dir / f"{task}.test.scores.jsonl", ids, scores))
            try:
                payload["test_auc"] = auc(ScoredSet(ids, scores, labels))
            except MetricError as e:
                logger.warning(f"Test AUC undefined: {e}")
        run.write_json(f"{verb}_report.json", payload)
        click.echo(
            f"{task}: best val AUC {result.best_val_auc} (epoch {result.best_epoch}), "
            f"test AUC {payload['test_auc']}"
        )


@cli.command("finetune")
@task_option
@encoder_option
@manifest_option
@click.option("--head", "head_kind", type=click.Choice(sorted(HEAD_KINDS)), default=None, help="Head kind")
@click.pass_context
def finetune_cmd(
    ctx: click.Context, task: str, encoder_path: str, manifest_path: Optional[str], head_kind: Optional[str]
) -> None:
    """Fine-tune the whole encoder with a classification head."""
    _adapt(ctx, "finetune", "full", task, encoder_path, manifest_path, head_kind)


@cli.command()
@task_option
@encoder_option
@manifest_option
@click.option("--head", "head_kind", type=click.Choice(sorted(HEAD_KINDS)), default=None, help="Head kind")
@click.pass_context
def probe(
    ctx: click.Context, task: str, encoder_path: str, manifest_path: Optional[str], head_kind: Optional[str]
) -> None:
    """Train a head on a frozen encoder (linear or attentive probing)."""
    _adapt(ctx, "probe", "probe", task, encoder_path, manifest_path, head_kind)


@cli.command()
@task_option
@encoder_option
@manifest_option
@click.option("--ks", default=None, help="Comma-separated shot counts (default from config)")
@click.option("--repeats", type=int, default=None, help="Repeats per shot count")
@click.pass_context
def fewshot(
    ctx: click.Context,
    task: str,
    encoder_path: str,
    manifest_path: Optional[str],
    ks: Optional[str],
    repeats: Optional[int],
) -> None:
    """Fine-tune on K positives and K negatives for each K and repeat."""
    with run_verb(ctx, "fewshot") as run:
        cfg = run.config
        manifest = _manifest(run, manifest_path)
        update: Dict[str, Any] = {}
        if ks:
            update["ks"] = _parse_ints(ks, "--ks")
        if repeats is not None:
            update["repeats"] = repeats
        plan = FewShotPlan.model_validate({**cfg.few_shot.model_dump(), **update})

        result = run_few_shot(
            _require_file(encoder_path, "Encoder checkpoint"),
            manifest,
            task,
            plan,
            cfg.finetune,
            cfg.head,
            cfg,
            cfg.seed,
            run.out_dir / "scores",
        )
        run.add(*result.score_files)
        payload = result.to_dict()
        payload["score_files"] = list_artifacts(result.score_files, run.out_dir)
        run.write_json("fewshot_report.json", {"task": task, "ks": list(plan.ks), "repeats": plan.repeats, **payload})
        for k, agg in sorted(result.aggregate.items()):
            click.echo(f"K={k}: AUC {agg['mean']:.4f} [{agg['ci_low']:.4f}, {agg['ci_high']:.4f}]")


@cli.command()
@task_option
@manifest_option
@click.pass_context
def sweep(ctx: click.Context, task: str, manifest_path: Optional[str]) -> None:
    """Grid-search a randomly initialised encoder and keep the best validation model."""
    with run_verb(ctx, "sweep") as run:
        cfg = run.config
        manifest = _manifest(run, manifest_path)
        result = sweep_scratch(manifest, task, cfg.sweep, cfg.finetune, cfg.head, cfg, cfg.seed)
        if result.best_classifier is not None:
            run.add(save_classifier(run.out_dir / "classifier.ckpt", result.best_classifier,
                                    meta={"task": task, "seed": cfg.seed, **result.best}))
        run.write_json("sweep_report.json", {"task": task, "runs": result.runs, "best": result.best})
        click.echo(f"Best of {len(result.runs)} grid points: {result.best}")


def _aligned(reference: ScoredSet, other: ScoredSet, name: str) -> ScoredSet:
    position = {v: i for i, v in enumerate(other.volume_ids)}
    if set(position) != set(reference.volume_ids) or len(position) != len(other):
        raise MetricError(f"Baseline '{name}' does not score the same volumes as the main scores file")
    return other.subset([position[v] for v in reference.volume_ids])


def _baseline(spec: str) -> Tuple[str, str]:
    name, sep, path = spec.partition("=")
    if not sep:
        return Path(spec).name.split(".")[0], spec
    return name, path


@cli.command()
@click.option("--scores", "scores_path", required=True, help="Scores file to evaluate")
@task_option
@manifest_option
@click.option("--baseline", "baselines", multiple=True, help="NAME=PATH scores file to compare against")
@click.option("--metric", default=None, type=click.Choice(["auc", "ap"]), help="Metric (default from config)")
@click.option("--threshold", type=float, default=None, help="Also report agreement at this score threshold")
@click.pass_context
def evaluate(
    ctx: click.Context,
    scores_path: str,
    task: str,
    manifest_path: Optional[str],
    baselines: Tuple[str, ...],
    metric: Optional[str],
    threshold: Optional[float],
) -> None:
    """Bootstrap a metric interval and run paired permutation tests against baselines."""
    with run_verb(ctx, "evaluate") as run:
        cfg = run.config
        manifest = _manifest(run, manifest_path)
        if task not in manifest.tasks:
            raise CLIError(f"Unknown task '{task}'. Declared tasks: {manifest.tasks}")
        labels = {r.volume_id: r.labels[task] for r in manifest.records}
        metric_name = metric or cfg.evaluation.metric
        metric_fn = metric_by_name(metric_name)

        main = ScoredSet.from_frame(read_scores(_require_file(scores_path, "Scores file")), labels)
        report = bootstrap_ci(metric_fn, main, cfg.evaluation.n_boot, cfg.seed)
        payload: Dict[str, Any] = {**report.to_dict(), "metric": metric_name, "task": task, "n": len(main)}

        comparisons: Dict[str, Any] = {}
        for spec in baselines:
            name, path = _baseline(spec)
            frame = read_scores(_require_file(path, "Baseline scores"))
            other = _aligned(main, ScoredSet.from_frame(frame, labels), name)
            result = paired_permutation_test(main, other, metric_fn, cfg.evaluation.n_perm, cfg.seed)
            comparisons[name] = result.to_dict()
        payload["comparisons"] = comparisons

        if threshold is not None:
            predicted = (main.scores >= threshold).astype(np.int64)
            payload["threshold"] = threshold
            payload["agreement"] = agreement_stats(predicted.tolist(), main.labels.tolist()).to_dict()

        run.write_json("metrics.json", payload)
        text = ReportGenerator.generate_metric_report({**payload, "config_hash": cfg.config_hash(), "seed": cfg.seed})
        run.write_text("metrics.txt", text)
        click.echo(text)


@cli.command()
@click.option("--embeddings", "embeddings_path", required=True, help="Embedding set (JSONL)")
@click.option("--subtype", "subtypes", multiple=True, help="Subtype to evaluate (default: all)")
@click.option("--gallery", type=click.Choice(sorted(GALLERY_MODES)), default=None, help="Gallery mode")
@click.pass_context
def retrieve(ctx: click.Context, embeddings_path: str, subtypes: Tuple[str, ...], gallery: Optional[str]) -> None:
    """All-vs-all cosine retrieval: mAP and Precision@K per subtype."""
    with run_verb(ctx, "retrieve") as run:
        cfg = run.config
        es = load_embedding_set(_require_file(embeddings_path, "Embedding set"))
        ks = cfg.evaluation.retrieval_ks
        gallery_mode = gallery or cfg.evaluation.gallery
        results = evaluate_retrieval(es, list(subtypes) or None, ks, gallery_mode)
        run.write_json("retrieval.json", {"gallery": gallery_mode, "ks": list(ks), "subtypes": results})
        text = ReportGenerator.generate_retrieval_report(results, ks)
        run.write_text("retrieval.txt", text)
        click.echo(text)


@cli.command()
@encoder_option
@manifest_option
@click.option("--volume-id", required=True, help="Manifest volume to interpret")
@click.option("--reduce", type=click.Choice(sorted(ATTENTION_REDUCTIONS)), default="mean_all", show_default=True)
@click.pass_context
def attnmap(ctx: click.Context, encoder_path: str, manifest_path: Optional[str], volume_id: str, reduce: str) -> None:
    """Per-patch mean attention distance of one volume, with a voxel heatmap."""
    with run_verb(ctx, "attnmap") as run:
        manifest = _manifest(run, manifest_path)
        encoder = load_encoder(_require_file(encoder_path, "Encoder checkpoint"))
        encoder.eval()
        dataset = _eval_dataset(run, manifest, [manifest.index_of(volume_id)])
        volume, _, _ = dataset[0]
        with torch.no_grad():
            te = encoder.encode_volumes(volume.unsqueeze(0), capture_attention=True)

        stack = attention_stack_from_embeddings(te, encoder.cfg.grid, encoder.cfg.patch_size)
        distance_map = attention_distance_map(stack, reduce)
        run.add(save_distance_map_json(distance_map, run.out_dir / f"{volume_id}.attn_distance.json"))
        if reduce == "mean_all":
            heatmap = export_heatmap(distance_map, encoder.cfg.input_dims)
            heatmap.id = f"{volume_id}_heatmap"
            run.add(save_volume(heatmap, run.out_dir / f"{volume_id}_heatmap"))
        finite = distance_map.values[np.isfinite(distance_map.values)]
        summary = {"volume_id": volume_id, "reduction": reduce,
                   "mean_distance": float(finite.mean()) if finite.size else None,
                   "n_null": int(distance_map.null_mask.sum())}
        run.write_json("attnmap_report.json", summary)
        click.echo(f"{volume_id}: mean attention distance {summary['mean_distance']} voxels")


@cli.command()
@click.option("--input-dims", default=None, help="Comma-separated input dims (default from config)")
@click.option("--patch-size", type=int, default=None, help="Current patch side (default from config)")
@click.option("--shrink", type=int, default=2, show_default=True, help="Patch side shrink factor")
@click.option("--compare", "compare_patch", type=int, default=None, help="Compare against this patch side instead")
@click.pass_context
def cost(
    ctx: click.Context,
    input_dims: Optional[str],
    patch_size: Optional[int],
    shrink: int,
    compare_patch: Optional[int],
) -> None:
    """Token count and self-attention cost of a smaller patch size."""
    with run_verb(ctx, "cost") as run:
        enc = run.config.encoder
        dims = _parse_ints(input_dims, "--input-dims") if input_dims else tuple(enc.input_dims)
        if len(dims) != 3:
            raise CLIError(f"--input-dims needs three values, got {dims}")
        patch = patch_size or enc.patch_size
        if compare_patch is not None:
            estimate = compare_patch_sizes(dims, patch, compare_patch, enc.embed_dim)  # type: ignore[arg-type]
        else:
            estimate = attention_cost_estimate(dims, patch, enc.embed_dim, shrink)  # type: ignore[arg-type]
        run.write_json("cost.json", estimate.to_dict())
        click.echo(f"tokens: {estimate.tokens_before} -> {estimate.tokens_after}")
        click.echo(f"token ratio: {estimate.token_ratio}")
        click.echo(f"attention ratio: {estimate.attn_flops_ratio}")


@cli.command()
@encoder_option
@manifest_option
@click.option("--split", type=click.Choice(["all", *SPLITS]), default="all", show_default=True)
@click.option("--pooling", type=click.Choice(sorted(POOLINGS)), default=None, help="Pooling (default from config)")
@click.option("--format", "fmt", type=click.Choice(["jsonl", "parquet"]), default="jsonl", show_default=True)
@click.pass_context
def embed(
    ctx: click.Context, encoder_path: str, manifest_path: Optional[str], split: str, pooling: Optional[str], fmt: str
) -> None:
    """Export pooled encoder embeddings with subtype labels."""
    with run_verb(ctx, "embed") as run:
        manifest = _manifest(run, manifest_path)
        encoder = load_encoder(_require_file(encoder_path, "Encoder checkpoint"))
        indices = list(range(len(manifest))) if split == "all" else manifest.split_indices(split)
        es = embed_volumes(encoder, _eval_dataset(run, manifest, indices), pooling or run.config.head.pooling,
                           run.config.finetune.batch_size)
        if fmt == "parquet":
            path = export_embedding_parquet(es, run.out_dir / "embeddings.parquet")
        else:
            path = save_embedding_set(es, run.out_dir / "embeddings.jsonl")
        run.add(path)
        click.echo(f"Wrote {len(es.records)} embeddings of dim {es.dim} to {path}")


if __name__ == "__main__":
    cli(obj={})

"""Command-line entry point: data generation, training, evaluation,
explanation export, and benchmarking."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from . import __version__
from .bench import TimingConfig, time_layers
from .domain import (
    ActionSchema,
    FeatureStats,
    apply_preprocessing,
    fit_and_apply_preprocessing,
    load_dataset,
    save_dataset,
    validate_sample,
)
from .explain_em import GlobalImportance, extract_local
from .head import ModelConfig
from .synthdata import GeneratorConfig, PersonaSpec, generate, ground_truth_report, manifest_for
from .train_eval import (
    TrainConfig,
    build_model,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history,
)


def load_config(path) -> dict:
    with open(path) as f:
        return yaml.safe_load(f) or {}


def schema_from_config(cfg: dict) -> ActionSchema:
    section = cfg.get("schema") or {}
    if not section:
        return ActionSchema.default()
    names = section.get("names")
    dims = section.get("dims")
    if names is None:
        return ActionSchema.default()
    if dims is None:
        dims = [1] * len(names)
    return ActionSchema(names=tuple(names), dims=tuple(dims), edge_dim=section.get("edge_dim", 3))


def generator_from_config(cfg: dict, schema: ActionSchema, seed: int | None) -> GeneratorConfig:
    section = dict(cfg.get("generator") or {})
    personas = [
        PersonaSpec(
            name=p["name"],
            base_rates=tuple(p["base_rates"]),
            weekly_amplitude=tuple(p["weekly_amplitude"]),
            dominant_actions=tuple(p["dominant_actions"]),
        )
        for p in section.pop("personas", [])
    ]
    if seed is not None:
        section["seed"] = seed
    return GeneratorConfig(schema=schema, personas=personas, **section)


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(**(cfg.get("model") or {}))


def train_config_from(cfg: dict, seed: int | None, variant: str | None) -> TrainConfig:
    section = dict(cfg.get("training") or {})
    if seed is not None:
        section["seed"] = seed
    if variant is not None:
        section["variant"] = variant
    return TrainConfig(**section)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, cfg: dict, seed: int | None, inputs: list, outputs: list, started: float) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "versions": {"engage": __version__, "torch": torch.__version__, "numpy": np.__version__},
        "wall_time_s": time.time() - started,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


@click.group()
def main():
    """Explainable engagement prediction over temporal ego-networks."""


@main.command("gen")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_gen(config_path, seed, out_dir):
    """Generate synthetic train/test datasets plus the ground-truth sidecar."""
    started = time.time()
    cfg = load_config(config_path)
    schema = schema_from_config(cfg)
    gen_cfg = generator_from_config(cfg, schema, seed)
    train_set, test_set, truth = generate(gen_cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_path = out / "train.jsonl"
    test_path = out / "test.jsonl"
    truth_path = out / "ground_truth.json"
    save_dataset(train_path, manifest_for(gen_cfg, "train"), train_set)
    save_dataset(test_path, manifest_for(gen_cfg, "test"), test_set)
    with open(truth_path, "w") as f:
        json.dump(ground_truth_report(truth), f, indent=2)

    bad = sum(bool(validate_sample(s, schema, expected_T=gen_cfg.T)) for s in train_set + test_set)
    if bad:
        raise click.ClickException(f"{bad} generated samples failed validation")
    write_manifest(out, "gen", cfg, gen_cfg.seed, [config_path], [train_path, test_path, truth_path], started)
    click.echo(f"wrote {len(train_set)} train / {len(test_set)} test samples to {out}")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--variant", type=str, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_train(config_path, data_path, seed, variant, out_dir):
    """Train a model; writes checkpoint, history, stats, and global importance."""
    started = time.time()
    cfg = load_config(config_path)
    manifest, samples = load_dataset(data_path)
    schema = manifest.schema
    train_cfg = train_config_from(cfg, seed, variant)
    model_cfg = model_config_from(cfg)

    processed, _, stats = fit_and_apply_preprocessing(samples, schema)
    result = train(processed, schema, train_cfg, model_cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.ckpt"
    stats_path = out / "feature_stats.json"
    history_path = out / "history.csv"
    outputs = [ckpt_path, stats_path, history_path]
    save_checkpoint(
        result.model,
        ckpt_path,
        meta={
            "variant": train_cfg.variant,
            "schema": schema.to_dict(),
            "model_config": model_cfg.__dict__,
            "T": manifest.T,
            "best_epoch": result.best_epoch,
        },
    )
    stats.save(stats_path)
    write_history(history_path, result.history)
    if result.global_importance is not None:
        gi_path = out / "global_importance.json"
        result.global_importance.save(gi_path)
        tstar_path = out / "t_star.csv"
        _write_matrix_csv(tstar_path, result.global_importance.T_star, schema.names)
        outputs += [gi_path, tstar_path]
    write_manifest(out, "train", cfg, train_cfg.seed, [config_path, data_path], outputs, started)
    click.echo(
        f"trained variant={train_cfg.variant}, best epoch {result.best_epoch}, "
        f"val RMSE {min(h['val_rmse'] for h in result.history):.4f}"
    )


def _load_model(cfg: dict, ckpt_path: Path):
    with open(ckpt_path, "rb") as f:
        meta = json.loads(f.readline().decode())["meta"]
    schema = ActionSchema.from_dict(meta["schema"])
    model_cfg = ModelConfig(**meta["model_config"])
    model = build_model(meta["variant"], schema, model_cfg, T=meta.get("T"))
    load_checkpoint(ckpt_path, model)
    model.eval()
    return model, schema, meta


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--stats", "stats_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_eval(config_path, data_path, ckpt_path, stats_path, out_dir):
    """Evaluate a checkpoint on a dataset split."""
    started = time.time()
    cfg = load_config(config_path)
    manifest, samples = load_dataset(data_path)
    model, schema, _ = _load_model(cfg, Path(ckpt_path))
    stats = FeatureStats.load(stats_path)
    processed = apply_preprocessing(samples, schema, stats)
    report = evaluate(model, processed, schema)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "eval_report.json"
    with open(report_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    write_manifest(out, "eval", cfg, None, [config_path, data_path, ckpt_path], [report_path], started)
    click.echo(json.dumps(report.to_dict()))


def _write_matrix_csv(path, matrix: np.ndarray, columns) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t"] + list(columns))
        for t, row in enumerate(np.asarray(matrix)):
            writer.writerow([t] + [f"{v:.8g}" for v in row])


def _heatmap(path, matrix: np.ndarray, title: str, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(np.asarray(matrix).T, aspect="auto", cmap="viridis")
    ax.set_xlabel("time step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@main.command("explain")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--stats", "stats_path", type=click.Path(exists=True), required=True)
@click.option("--global-importance", "gi_path", type=click.Path(exists=True), default=None)
@click.option("--limit", type=int, default=20, help="How many users to export.")
@click.option("--no-plots", is_flag=True, default=False)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_explain(config_path, data_path, ckpt_path, stats_path, gi_path, limit, no_plots, out_dir):
    """Export per-user importance vectors and (optionally) heatmap images."""
    started = time.time()
    cfg = load_config(config_path)
    manifest, samples = load_dataset(data_path)
    model, schema, meta = _load_model(cfg, Path(ckpt_path))
    if meta["variant"] == "tmp":
        raise click.ClickException("the tmp variant produces no attention explanations")
    stats = FeatureStats.load(stats_path)
    processed = apply_preprocessing(samples[:limit], schema, stats)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    locals_ = extract_local(model, processed, schema)
    from .head import collate

    with torch.no_grad():
        batch = collate(processed, schema)
        mix, _ = model(batch)
        preds = mix.point_estimate.cpu().numpy()

    users_path = out / "local_importance.json"
    payload = []
    for s, iv, pred in zip(processed, locals_, preds):
        payload.append({"user_id": s.user_id, "prediction": float(pred), **iv.to_dict()})
    with open(users_path, "w") as f:
        json.dump(payload, f, indent=2)
    outputs.append(users_path)

    for s, iv in list(zip(processed, locals_))[:5]:
        csv_path = out / f"user_{s.user_id}_temporal.csv"
        _write_matrix_csv(csv_path, iv.Tm, schema.names)
        outputs.append(csv_path)
        if not no_plots:
            img = out / f"user_{s.user_id}_temporal.png"
            _heatmap(img, iv.Tm, f"user {s.user_id} temporal importance", "action")
            outputs.append(img)

    if gi_path:
        gi = GlobalImportance.load(gi_path)
        gi_csv = out / "t_star.csv"
        _write_matrix_csv(gi_csv, gi.T_star, schema.names)
        outputs.append(gi_csv)
        if not no_plots:
            img = out / "t_star.png"
            _heatmap(img, gi.T_star, "global temporal importance", "action")
            outputs.append(img)

    write_manifest(out, "explain", cfg, None, [config_path, data_path, ckpt_path], outputs, started)
    click.echo(f"exported explanations for {len(processed)} users to {out}")


@main.command("bench")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_bench(config_path, seed, out_dir):
    """Run the parameter/FLOP/runtime comparison and emit a report."""
    started = time.time()
    cfg = load_config(config_path) if config_path else {}
    section = dict(cfg.get("bench") or {})
    if seed is not None:
        section["seed"] = seed
    timing_cfg = TimingConfig(**section)
    report = time_layers(timing_cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "complexity.json"
    txt_path = out / "complexity.txt"
    with open(json_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    with open(txt_path, "w") as f:
        f.write(report.table() + "\n")
    write_manifest(out, "bench", cfg, timing_cfg.seed, [config_path] if config_path else [], [json_path, txt_path], started)
    click.echo(report.table())


if __name__ == "__main__":
    main()

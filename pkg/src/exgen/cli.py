"""Command-line interface.

Subcommands cover the whole pipeline: prepare-data, train (sft/rm/ppo),
train-classifier, evaluate, generate, serve.  Global flags: --config (JSON
file with per-subcommand defaults), --seed, --run-dir (persist artifacts),
--preset (toy | full).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import __version__
from .checkpoint import checkpoint_id, checkpoint_load
from .control import AttributeClassifier, train_attribute_classifier
from .corpus import (DEFAULT_THEMES, ContentConstraints, CorpusConfig,
                     load_dataset, synthesize_toy_corpus)
from .metrics import evaluate_run
from .model import SamplerConfig, derive_seed, sample
from .service import (GenerationEngine, GenerationRequest, create_app,
                      persist_run)
from .training import PpoConfig, StageConfig, toy_stage_config, train_stage


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _merged(ctx: click.Context, section: str, key: str, value, default):
    """CLI flag > config-file section > hardcoded default."""
    if value is not None:
        return value
    return ctx.obj["config"].get(section, {}).get(key, default)


@click.group()
@click.version_option(version=__version__)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON file with per-subcommand defaults.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--run-dir", type=click.Path(file_okay=False), default=None,
              help="Persist artifacts of this invocation under a run directory.")
@click.option("--preset", type=click.Choice(["toy", "full"]), default="toy",
              show_default=True)
@click.pass_context
def main(ctx, config_path, seed, run_dir, preset):
    """Reading-comprehension exercise generation pipeline."""
    ctx.obj = {
        "config": _load_config(config_path),
        "seed": seed,
        "run_dir": run_dir,
        "preset": preset,
    }


@main.command("prepare-data")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="data")
@click.option("--num-sft", type=int, default=None)
@click.option("--num-pref", type=int, default=None)
@click.option("--num-prompts", type=int, default=None)
@click.option("--marker-rate", type=float, default=None)
@click.option("--themes", type=str, default=None,
              help="Comma-separated theme names (defaults to all built-ins).")
@click.pass_context
def prepare_data(ctx, out_dir, num_sft, num_pref, num_prompts, marker_rate, themes):
    """Synthesize the toy sft / preference / prompt files."""
    section = "prepare_data"
    config = CorpusConfig(
        num_sft=_merged(ctx, section, "num_sft", num_sft, 2000),
        num_pref=_merged(ctx, section, "num_pref", num_pref, 200),
        num_prompts=_merged(ctx, section, "num_prompts", num_prompts, 200),
        vocab_themes=tuple(
            t.strip() for t in _merged(ctx, section, "themes", themes,
                                       ",".join(DEFAULT_THEMES)).split(",")
        ),
        toxic_marker_rate=_merged(ctx, section, "marker_rate", marker_rate, 0.3),
    )
    paths = synthesize_toy_corpus(config, ctx.obj["seed"], out_dir)
    for kind, path in paths.items():
        click.echo(f"{kind}: {path}")


def _stage_config(ctx, stage: str, epochs, lr, batch_size) -> StageConfig:
    cfg = toy_stage_config(stage) if ctx.obj["preset"] == "toy" else StageConfig(
        epochs=8 if stage == "rm" else 3)
    overrides = {}
    if epochs is not None:
        overrides["epochs"] = epochs
    if lr is not None:
        overrides["learning_rate"] = lr
    if batch_size is not None:
        overrides["batch_size"] = batch_size
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


@main.command()
@click.option("--stage", type=click.Choice(["sft", "rm", "ppo"]), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--sft-checkpoint", type=click.Path(), default=None)
@click.option("--rm-checkpoint", type=click.Path(), default=None)
@click.option("--log", "log_path", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.pass_context
def train(ctx, stage, data_path, out_path, sft_checkpoint, rm_checkpoint,
          log_path, epochs, lr, batch_size):
    """Run one training stage and save its checkpoint."""
    ppo_section = ctx.obj["config"].get("ppo", {})
    summary = train_stage(
        stage,
        data_path=data_path,
        out_path=out_path,
        seed=ctx.obj["seed"],
        stage_cfg=_stage_config(ctx, stage, epochs, lr, batch_size),
        ppo_cfg=PpoConfig(**ppo_section) if stage == "ppo" else None,
        sft_checkpoint=sft_checkpoint,
        rm_checkpoint=rm_checkpoint,
        log_path=log_path,
    )
    click.echo(json.dumps(summary, indent=2, default=str))
    if ctx.obj["run_dir"]:
        files = {"checkpoint.rceg": Path(out_path)}
        if log_path:
            files["training_log.jsonl"] = Path(log_path)
        run = persist_run(ctx.obj["run_dir"], files, seed=ctx.obj["seed"],
                          config=summary.get("config"))
        click.echo(f"run persisted: {run}")


@main.command("train-classifier")
@click.option("--data", "data_path", type=click.Path(exists=True), required=True,
              help="Preference file; chosen responses are clean, rejected toxic.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.pass_context
def train_classifier(ctx, data_path, out_path):
    """Fit the attribute classifier from preference pairs."""
    pairs = load_dataset("preference", data_path)
    samples = [(p.chosen, "clean") for p in pairs] + [(p.rejected, "toxic") for p in pairs]
    clf, accuracy = train_attribute_classifier(samples, seed=ctx.obj["seed"])
    clf.save(out_path)
    click.echo(f"classifier saved to {out_path}; holdout accuracy {accuracy:.3f}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True,
              help="SFT-format file with reference exercises.")
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--limit", type=int, default=50, show_default=True)
@click.option("--max-new-tokens", type=int, default=160, show_default=True)
@click.pass_context
def evaluate(ctx, checkpoint, data_path, out_path, limit, max_new_tokens):
    """Generate from each prompt and score against the references."""
    model = checkpoint_load(checkpoint)
    triplets = load_dataset("sft", data_path)[:limit]
    seed = ctx.obj["seed"]
    hypotheses = []
    for i, triplet in enumerate(triplets):
        ids = sample(model, model.vocab.tokenize(triplet.prompt()),
                     SamplerConfig(temperature=1.0, top_k=0,
                                   max_new_tokens=max_new_tokens,
                                   seed=derive_seed(seed, "evaluate", i)))
        hypotheses.append(model.vocab.detokenize(ids))
    report = evaluate_run(model, hypotheses, [t.reference for t in triplets])
    click.echo(json.dumps(
        {k: round(v * 100, 2) if k != "ppl" else round(v, 3)
         for k, v in report.summary().items() if isinstance(v, float)}))
    if out_path:
        report.save(out_path)
        click.echo(f"report written to {out_path}")
    if ctx.obj["run_dir"] and out_path:
        run = persist_run(ctx.obj["run_dir"], {"metrics.jsonl": Path(out_path)},
                          seed=seed, config={"checkpoint": str(checkpoint)})
        click.echo(f"run persisted: {run}")


def _constraints_from_options(theme, style, word_count, num_questions,
                              num_options, difficulty) -> ContentConstraints:
    return ContentConstraints(theme=theme, style=style, word_count=word_count,
                              num_questions=num_questions,
                              num_options=num_options, difficulty=difficulty)


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--classifier", "classifier_path", type=click.Path(exists=True),
              required=True)
@click.option("--theme", default="space travel", show_default=True)
@click.option("--style", default="narrative", show_default=True)
@click.option("--word-count", type=int, default=24, show_default=True)
@click.option("--num-questions", type=int, default=1, show_default=True)
@click.option("--num-options", type=int, default=4, show_default=True)
@click.option("--difficulty", type=click.Choice(["basic", "intermediate", "advanced"]),
              default="basic", show_default=True)
@click.pass_context
def generate(ctx, checkpoint, classifier_path, theme, style, word_count,
             num_questions, num_options, difficulty):
    """One-shot steered generation; prints the exercise and candidate scores."""
    engine = GenerationEngine(
        checkpoint_load(checkpoint),
        AttributeClassifier.load(classifier_path),
        checkpoint_id=checkpoint_id(checkpoint),
    )
    request = GenerationRequest(
        constraints=_constraints_from_options(theme, style, word_count,
                                              num_questions, num_options,
                                              difficulty),
        seed=ctx.obj["seed"],
    )
    response = engine.handle_generate(request)
    click.echo(json.dumps(response.to_dict(), indent=2, ensure_ascii=False))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--classifier", "classifier_path", type=click.Path(exists=True),
              required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--ui-dir", type=click.Path(file_okay=False), default=None,
              help="Static directory to mount at / (the built frontend).")
@click.pass_context
def serve(ctx, checkpoint, classifier_path, host, port, ui_dir):
    """Start the HTTP API (and optionally the static UI)."""
    import uvicorn

    engine = GenerationEngine(
        checkpoint_load(checkpoint),
        AttributeClassifier.load(classifier_path),
        checkpoint_id=checkpoint_id(checkpoint),
    )
    app = create_app(engine, runs_root=ctx.obj["run_dir"], ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())

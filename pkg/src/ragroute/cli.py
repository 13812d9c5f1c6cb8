"""Command-line interface.

Subcommands: ingest, embed, label, train, eval, sweep-layers, viz, route,
serve. Each reads a TOML config (--config or $EIARAG_CONFIG) with every
key overridable by flag, writes artifacts to an output directory, and
exits 0 on success or nonzero with a machine-parsable `error: ...` line.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys

import click

from . import __version__
from .backends import build_backends
from .classifier import TrainConfig, init_model, load_model, save_model, train as train_op
from .config import load_config
from .dataset import load_query_set, save_query_set, split_query_set, split_report
from .embedding import (
    read_embedding_cache,
    sentence_embedding,
    write_embedding_cache,
)
from .errors import RagRouteError
from .evaluation import (
    EvalConfig,
    annotate_correctness,
    emit_viz,
    evaluate,
    sweep_layers,
    write_combined_csv,
    write_layer_sweep_csv,
    write_report_json,
    write_viz_csv,
)
from .labeler import LabelConfig, build_labeled_set, load_labeled_set, save_labeled_set
from .routers import (
    EmbeddingRouter,
    FrequencyRouter,
    FullRetrievalRouter,
    NoRetrievalRouter,
    OracleRouter,
    PromptedRouter,
    fit_frequency_thresholds,
)

log = logging.getLogger(__name__)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RagRouteError as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="TOML config file (default: $EIARAG_CONFIG).")
@click.version_option(__version__)
@click.pass_context
def main(ctx, config_path):
    """Adaptive retrieval routing for retrieval-augmented generation."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    try:
        ctx.obj["config"] = load_config(config_path)
    except RagRouteError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(1)


def _outdir(config, out):
    path = out or config.get("paths", {}).get("output_dir", "out")
    os.makedirs(path, exist_ok=True)
    return path


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--train-fraction", default=0.75, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, help="Output directory.")
@click.pass_context
@handle_errors
def ingest(ctx, dataset, train_fraction, seed, out):
    """Validate a JSONL dataset and write train/test splits."""
    outdir = _outdir(ctx.obj["config"], out)
    qs = load_query_set(dataset)
    train_qs, test_qs = split_query_set(qs, train_fraction, seed)
    save_query_set(train_qs, os.path.join(outdir, "train.jsonl"))
    save_query_set(test_qs, os.path.join(outdir, "test.jsonl"))
    with open(os.path.join(outdir, "split_report.json"), "w", encoding="utf-8") as fh:
        json.dump(split_report(qs, train_fraction, seed), fh, indent=2)
    click.echo(f"ingested {len(qs)} records -> {len(train_qs)} train / {len(test_qs)} test")


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--layer", default=1, show_default=True)
@click.option("--include-bos", is_flag=True, default=False)
@click.option("--out", default=None)
@click.pass_context
@handle_errors
def embed(ctx, dataset, layer, include_bos, out):
    """Compute sentence embeddings for a query set into the binary cache."""
    config = ctx.obj["config"]
    outdir = _outdir(config, out)
    backends = build_backends(config)
    qs = load_query_set(dataset)
    embeddings = [
        sentence_embedding(q.question, backends.provider, layer=layer,
                           include_bos=include_bos, query_id=q.id)
        for q in qs
    ]
    cache_path = os.path.join(outdir, f"embeddings_layer{layer}.bin")
    write_embedding_cache(embeddings, cache_path)
    click.echo(f"wrote {len(embeddings)} embeddings to {cache_path}")


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True),
              help="Training-split JSONL to label.")
@click.option("--layer", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--strict", is_flag=True, default=False)
@click.option("--out", default=None)
@click.pass_context
@handle_errors
def label(ctx, dataset, layer, seed, strict, out):
    """Dual-inference labeling of the training split."""
    config = ctx.obj["config"]
    outdir = _outdir(config, out)
    backends = build_backends(config)
    qs = load_query_set(dataset)
    cfg = LabelConfig(layer=layer, seed=seed, strict=strict)
    labeled = build_labeled_set(qs, backends.client, backends.index, backends.provider, cfg)
    save_labeled_set(labeled, os.path.join(outdir, "labels.jsonl"))
    write_embedding_cache([ex.embedding for ex in labeled],
                          os.path.join(outdir, "label_embeddings.bin"))
    counts = labeled.counts()
    click.echo(f"labeled {len(labeled)}: {counts['label_1']} positive, {counts['label_0']} negative")


@main.command(name="train")
@click.option("--labels", required=True, type=click.Path(exists=True))
@click.option("--embeddings", required=True, type=click.Path(exists=True))
@click.option("--learning-rate", default=1e-3, show_default=True)
@click.option("--max-epochs", default=50, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--val-fraction", default=0.1, show_default=True)
@click.option("--hidden", nargs=2, type=int, default=(256, 64), show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None)
@click.pass_context
@handle_errors
def train_cmd(ctx, labels, embeddings, learning_rate, max_epochs, batch_size,
              val_fraction, hidden, seed, out):
    """Train the retrieval-necessity classifier."""
    config = ctx.obj["config"]
    outdir = _outdir(config, out)
    cache = {e.query_id: e for e in read_embedding_cache(embeddings)}
    labeled = load_labeled_set(labels, cache)
    dim = labeled.examples[0].embedding.dim
    cfg = TrainConfig(learning_rate=learning_rate, max_epochs=max_epochs,
                      batch_size=batch_size, val_fraction=val_fraction, seed=seed)
    model = init_model(dim, hidden[0], hidden[1], seed=seed)
    trained, training_log = train_op(model, labeled, cfg)
    model_path = os.path.join(outdir, "model.bin")
    save_model(trained, model_path)
    with open(os.path.join(outdir, "training_log.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "epoch_losses": training_log.epoch_losses,
                "val_accuracies": training_log.val_accuracies,
                "best_epoch": training_log.best_epoch,
                "best_val_accuracy": training_log.best_val_accuracy,
                "notes": training_log.notes,
            },
            fh, indent=2,
        )
    click.echo(f"saved {model_path} (best epoch {trained.best_epoch}, "
               f"val acc {trained.val_accuracy:.4f})")


def _build_router(name, config, backends, model_path, threshold, train_qs=None):
    if name in ("no", "no-retrieval", "none"):
        return NoRetrievalRouter()
    if name in ("all", "full", "full-retrieval"):
        return FullRetrievalRouter()
    if name == "ei":
        model = load_model(model_path)
        return EmbeddingRouter(model, backends.provider, threshold=threshold)
    if name in ("prompted-vanilla", "vanilla"):
        return PromptedRouter(backends.client, variant="vanilla")
    if name in ("prompted-taare", "taare"):
        return PromptedRouter(backends.client, variant="taare")
    if name == "frequency":
        if train_qs is None:
            raise RagRouteError("frequency policy needs --train-dataset to fit thresholds")
        correctness = annotate_correctness(train_qs, backends.client, backends.index)
        return FrequencyRouter(fit_frequency_thresholds(train_qs, correctness))
    if name == "oracle":
        return None  # resolved against the test set by the caller
    raise RagRouteError(f"unknown policy {name!r}")


ALL_POLICIES = ("no", "all", "frequency", "prompted-vanilla", "prompted-taare", "ei", "oracle")


@main.command(name="eval")
@click.option("--dataset", required=True, type=click.Path(exists=True),
              help="Test-split JSONL.")
@click.option("--policy", default="ei", show_default=True,
              help="Policy name, or 'all-policies' for the full table.")
@click.option("--model", "model_path", type=click.Path(), default=None)
@click.option("--train-dataset", type=click.Path(exists=True), default=None,
              help="Training split (exemplars, frequency thresholds).")
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None)
@click.pass_context
@handle_errors
def eval_cmd(ctx, dataset, policy, model_path, train_dataset, threshold, seed, out):
    """Evaluate routing policies; writes per-policy JSON and a combined CSV."""
    config = ctx.obj["config"]
    outdir = _outdir(config, out)
    backends = build_backends(config)
    test_qs = load_query_set(dataset)
    train_qs = load_query_set(train_dataset) if train_dataset else None
    model_path = model_path or config.get("paths", {}).get("model")
    cfg = EvalConfig(exemplar_source=train_qs or test_qs, seed=seed)
    names = ALL_POLICIES if policy == "all-policies" else (policy,)
    reports = []
    for name in names:
        if name == "oracle":
            correctness = annotate_correctness(
                test_qs, backends.client, backends.index,
                LabelConfig(exemplar_source=cfg.exemplar_source, seed=seed),
            )
            router = OracleRouter(correctness)
        else:
            router = _build_router(name, config, backends, model_path, threshold, train_qs)
        report = evaluate(router, test_qs, backends.client, backends.index, cfg)
        write_report_json(report, os.path.join(outdir, f"report_{router.name}.json"))
        reports.append(report)
        click.echo(f"{router.name}: ACC {report.acc_percent:.2f}% POR {report.por_percent:.2f}%")
    write_combined_csv(reports, os.path.join(outdir, "reports.csv"))


@main.command(name="sweep-layers")
@click.option("--layers", required=True, help="Comma-separated layer indices, e.g. 0,1.")
@click.option("--train-dataset", required=True, type=click.Path(exists=True))
@click.option("--test-dataset", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None)
@click.pass_context
@handle_errors
def sweep_layers_cmd(ctx, layers, train_dataset, test_dataset, seed, out):
    """Train/evaluate one classifier per embedding layer; writes CSV."""
    config = ctx.obj["config"]
    outdir = _outdir(config, out)
    backends = build_backends(config)
    layer_list = [int(x) for x in layers.split(",") if x.strip() != ""]
    train_qs = load_query_set(train_dataset)
    test_qs = load_query_set(test_dataset)
    rows = sweep_layers(
        layer_list, train_qs, test_qs, backends.client, backends.index, backends.provider,
        label_cfg=LabelConfig(seed=seed),
        train_cfg=TrainConfig(seed=seed),
        eval_cfg=EvalConfig(exemplar_source=train_qs, seed=seed),
    )
    csv_path = os.path.join(outdir, "layer_sweep.csv")
    write_layer_sweep_csv(rows, csv_path)
    for layer, acc in rows:
        click.echo(f"layer {layer}: ACC {acc:.2f}%")
    click.echo(f"wrote {csv_path}")


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--embeddings", required=True, type=click.Path(exists=True),
              help="Binary embedding cache keyed by query id.")
@click.option("--out", default=None)
@click.pass_context
@handle_errors
def viz(ctx, dataset, embeddings, out):
    """Emit the 2D projection CSV (query_id,x,y,log_freq,relation)."""
    config = ctx.obj["config"]
    outdir = _outdir(config, out)
    qs = load_query_set(dataset)
    embs = read_embedding_cache(embeddings)
    rows = emit_viz(embs, qs)
    csv_path = os.path.join(outdir, "viz.csv")
    write_viz_csv(rows, csv_path)
    click.echo(f"wrote {len(rows)} rows to {csv_path}")


@main.command()
@click.option("--question", required=True)
@click.option("--model", "model_path", type=click.Path(), default=None)
@click.option("--threshold", default=0.5, show_default=True)
@click.pass_context
@handle_errors
def route(ctx, question, model_path, threshold):
    """One-off routing decision; prints a JSON object."""
    config = ctx.obj["config"]
    backends = build_backends(config)
    model_path = model_path or config.get("paths", {}).get("model")
    if not model_path:
        raise RagRouteError("route needs --model or paths.model in config")
    router = _build_router("ei", config, backends, model_path, threshold)
    from .dataset import QueryRecord

    decision = router.route(QueryRecord(id="cli", question=question, answers=("",)))
    click.echo(json.dumps({
        "retrieve": decision.retrieve,
        "score": decision.score,
        "policy": decision.policy,
        "decision_ms": decision.decision_latency * 1000.0,
    }))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
@click.option("--model", "model_path", type=click.Path(), default=None)
@click.option("--threshold", default=0.5, show_default=True)
@click.pass_context
@handle_errors
def serve(ctx, host, port, model_path, threshold):
    """Run the HTTP routing service (/route, /answer, /healthz)."""
    import uvicorn

    from .service import ServiceState, build_app

    config = ctx.obj["config"]
    backends = build_backends(config)
    model_path = model_path or config.get("paths", {}).get("model")
    if not model_path or not os.path.exists(model_path):
        raise RagRouteError("serve needs a trained model file (--model or paths.model)")
    router = _build_router("ei", config, backends, model_path, threshold)
    state = ServiceState(router=router, client=backends.client, index=backends.index)
    uvicorn.run(build_app(state), host=host, port=port)


if __name__ == "__main__":
    main()

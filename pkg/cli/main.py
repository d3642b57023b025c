# cli/main.py
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import typer
from pydantic import BaseModel, Field
from pydantic import ValidationError as PydanticValidationError
from rich.console import Console
from rich.table import Table

from mmkg_core import datastore, evaluator, graph, knn, recommender, search, trainer
from mmkg_core.exceptions import (
    ArtifactMismatchError,
    ConfigurationError,
    MMKGError,
    NumericalError,
    ValidationError,
)
from utility.config import LogLevel, settings
from utility.utility import atomic_write_text, hash_path

app = typer.Typer(no_args_is_help=True)
console = Console()
logger = logging.getLogger(__name__)

NEIGHBORS_FILE = "neighbors.npz"
FINGERPRINT_FILE = "fingerprint.txt"
CHECKPOINT_FILE = "checkpoint.emkg"
METRICS_FILE = "metrics.jsonl"
MANIFEST_FILE = "manifest.json"


class RunManifest(BaseModel):
    """What one subcommand ran with and what it wrote."""
    command: str
    flags: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    started_at: str = ""
    duration_seconds: float = 0.0


class Run:
    """Collects inputs and outputs of a subcommand and writes its manifest."""

    def __init__(self, command: str, out_dir: Path, flags: Dict[str, Any], seed: Optional[int] = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.started = time.monotonic()
        self.manifest = RunManifest(
            command=command,
            flags={k: (str(v) if isinstance(v, Path) else v) for k, v in flags.items()},
            seed=seed,
            started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )

    def input(self, path: Path) -> Path:
        path = Path(path)
        if path.is_file():
            self.manifest.inputs[str(path)] = hash_path(path)
        return path

    def output(self, name: str) -> Path:
        path = self.out_dir / name
        self.manifest.outputs.append(str(path))
        return path

    def finish(self) -> Path:
        self.manifest.duration_seconds = round(time.monotonic() - self.started, 3)
        path = self.out_dir / MANIFEST_FILE
        atomic_write_text(path, self.manifest.model_dump_json(indent=2) + "\n")
        return path


@contextmanager
def handle_errors():
    """Map engine errors to exit codes: 2 input, 3 numeric, 4 artifact mismatch, 1 unknown."""
    try:
        yield
    except typer.Exit:
        raise
    except NumericalError as e:
        console.print(f"[bold red]Numerical failure:[/bold red] {e}")
        raise typer.Exit(code=3)
    except ArtifactMismatchError as e:
        console.print(f"[bold red]Artifact mismatch:[/bold red] {e}")
        raise typer.Exit(code=4)
    except (MMKGError, PydanticValidationError, FileNotFoundError) as e:
        console.print(f"[bold red]Error:[/bold red] {e}")
        raise typer.Exit(code=2)
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        raise typer.Exit(code=1)


@app.callback()
def main_callback(
    log_level: LogLevel = typer.Option(settings.LOG_LEVEL, "--log-level", help="Root log level."),
):
    """
    Multimodal knowledge-graph representations for recommendation and search.
    """
    logging.basicConfig(
        level=getattr(logging, log_level.value),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


# ---------------------------------------------------------------------------
# Shared loading
# ---------------------------------------------------------------------------

@dataclass
class Inputs:
    store: datastore.FeatureStore
    interactions: datastore.InteractionData
    mm_graph: graph.MMGraph


def _workers(threads: Optional[int]) -> int:
    if threads is not None and threads < 1:
        raise ConfigurationError(f"--threads must be at least 1, got {threads}")
    return settings.resolve_threads(threads)


def _check_cutoffs(cutoffs: List[int]) -> List[int]:
    if not cutoffs or min(cutoffs) < 1:
        raise ConfigurationError(f"Cutoffs must be positive integers, got {cutoffs}")
    return sorted(set(cutoffs))


def _parse_modalities(entries: List[str]) -> Dict[str, int]:
    dims: Dict[str, int] = {}
    for entry in entries:
        name, sep, dim = entry.partition(":")
        if not sep or not name or not dim.isdigit():
            raise ValidationError(f"Modality {entry!r} must look like name:dim")
        dims[name] = int(dim)
    return dims


def _load_inputs(run: Run, data_dir: Path, graph_dir: Path, variant: graph.Variant, seed: int) -> Inputs:
    store = datastore.load_feature_store(data_dir)
    for tau in store.modality_types:
        run.input(data_dir / f"{tau}{datastore.FEATURE_SUFFIX}")
    run.input(data_dir / datastore.ITEMS_FILE)
    interactions = datastore.split_interactions(
        datastore.load_interactions(run.input(data_dir / datastore.INTERACTIONS_FILE), store), seed
    )
    neighbors = knn.load_neighbors(run.input(graph_dir / NEIGHBORS_FILE))
    mm_graph = graph.assemble_variant(store, neighbors, interactions, variant)
    return Inputs(store=store, interactions=interactions, mm_graph=mm_graph)


def _load_trained(run: Run, data_dir: Path, graph_dir: Path, run_dir: Path, allow_mismatch: bool):
    """Checkpoint plus the graph it must have been trained on, with propagated embeddings."""
    path = run.input(run_dir / CHECKPOINT_FILE)
    checkpoint = trainer.load_checkpoint(path)
    config = checkpoint.config
    inputs = _load_inputs(run, data_dir, graph_dir, config.variant, config.seed)
    trainer.verify_fingerprint(checkpoint, inputs.mm_graph.fingerprint.digest, allow_mismatch, str(path))
    store = inputs.store.zeroed() if config.zero_modalities else inputs.store
    snapshot = recommender.compute_embeddings(
        checkpoint.params, store, inputs.mm_graph, graph.assemble_interaction_graph(inputs.interactions), config.layers
    )
    return checkpoint, inputs, snapshot


def _print_manifest(run: Run) -> None:
    path = run.finish()
    console.print(f"[green]Manifest written to {path}[/green]")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@app.command()
def synth(
    out_dir: Path = typer.Argument(..., help="Directory for the generated dataset."),
    items: int = typer.Option(300, "--items", help="Catalog size."),
    users: int = typer.Option(200, "--users", help="Number of users."),
    clusters: int = typer.Option(10, "--clusters", help="Planted item clusters."),
    interactions: int = typer.Option(4000, "--interactions", help="Target number of interactions."),
    modality: List[str] = typer.Option(["image:32", "description:32"], "--modality", help="Modality as name:dim; repeatable."),
    noise: float = typer.Option(0.1, "--noise", help="Feature noise norm around the cluster centroids."),
    preference: float = typer.Option(0.9, "--preference", help="Probability a draw comes from a preferred cluster."),
    fine_queries: int = typer.Option(100, "--fine-queries", help="Fine-grained search queries to generate."),
    coarse_queries: int = typer.Option(20, "--coarse-queries", help="Coarse-grained search queries to generate."),
    query_noise: float = typer.Option(0.05, "--query-noise", help="Noise norm added to query vectors."),
    seed: int = typer.Option(settings.SEED, "--seed", help="Run seed."),
):
    """
    Generate a planted-cluster dataset with fine and coarse search queries.
    """
    with handle_errors():
        run = Run("synth", out_dir, dict(locals()), seed)
        config = datastore.SyntheticConfig(
            n_items=items,
            n_users=users,
            modality_dims=_parse_modalities(modality),
            n_clusters=clusters,
            n_interactions=interactions,
            noise=noise,
            preference=preference,
            seed=seed,
        )
        dataset = datastore.generate_synthetic(config)
        for path in datastore.write_dataset(dataset, out_dir):
            run.manifest.outputs.append(str(path))
        queries = search.generate_synthetic_queries(dataset, fine_queries, coarse_queries, query_noise, seed)
        search.write_queries(queries, run.output(search.QUERIES_FILE))
        console.print(
            f"[bold green]✅ Wrote {dataset.store.n_items} items, {dataset.interactions.n_pairs} "
            f"interactions and {len(queries)} queries to {out_dir}[/bold green]"
        )
        _print_manifest(run)


@app.command("build-graph")
def build_graph(
    data_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Dataset directory."),
    graph_dir: Path = typer.Argument(..., help="Output directory for neighbors and fingerprint."),
    variant: graph.Variant = typer.Option(graph.Variant.ORIGINAL, "--variant", help="Graph structure."),
    knn_n: int = typer.Option(settings.KNN, "--knn", help="Top-n neighbors per modality instance."),
    seed: int = typer.Option(settings.SEED, "--seed", help="Seed of the interaction split."),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker cap (default EMMKGR_THREADS or all cores)."),
):
    """
    Compute kNN lists per modality and assemble the multimodal knowledge graph.
    """
    with handle_errors():
        run = Run("build-graph", graph_dir, dict(locals()), seed)
        store = datastore.load_feature_store(data_dir)
        workers = _workers(threads)
        neighbors = {}
        for tau in store.modality_types:
            run.input(data_dir / f"{tau}{datastore.FEATURE_SUFFIX}")
            neighbors[tau] = knn.topn_cosine(store.matrix(tau), knn_n, threads=workers)
            if neighbors[tau].clamped:
                console.print(f"[yellow]kNN for {tau!r} clamped to n={neighbors[tau].n}[/yellow]")
        interactions = None
        if variant is graph.Variant.INTERACTION:
            interactions = datastore.split_interactions(
                datastore.load_interactions(run.input(data_dir / datastore.INTERACTIONS_FILE), store), seed
            )
        mm_graph = graph.assemble_variant(store, neighbors, interactions, variant)
        knn.save_neighbors(neighbors, run.output(NEIGHBORS_FILE))
        fingerprint = mm_graph.fingerprint
        graph.write_fingerprint(fingerprint, run.output(FINGERPRINT_FILE))

        table = Table(title=f"Graph {fingerprint.variant}")
        table.add_column("property")
        table.add_column("value", justify="right")
        table.add_row("nodes", str(fingerprint.n_nodes))
        table.add_row("modality nodes", str(fingerprint.n_modality_nodes))
        for family, count in sorted(fingerprint.edge_counts.items()):
            table.add_row(f"edges.{family}", str(count))
        console.print(table)
        console.print(f"Content hash: [cyan]{fingerprint.content_hash}[/cyan]")
        _print_manifest(run)


@app.command()
def train(
    data_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Dataset directory."),
    graph_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of build-graph."),
    run_dir: Path = typer.Argument(..., help="Directory for the checkpoint and reports."),
    dim: int = typer.Option(settings.DIM, "--dim", help="Embedding dimension (even)."),
    layers: int = typer.Option(settings.LAYERS, "--layers", help="Propagation layers."),
    lambda_kg: float = typer.Option(settings.LAMBDA_KG, "--lambda-kg", help="Weight of the KG loss."),
    lr: float = typer.Option(settings.LR, "--lr", help="Learning rate."),
    weight_decay: float = typer.Option(settings.WEIGHT_DECAY, "--weight-decay", help="L2 coefficient."),
    bpr_batch_size: int = typer.Option(settings.BPR_BATCH_SIZE, "--bpr-batch-size", help="BPR triples per step."),
    kg_batch_size: int = typer.Option(settings.KG_BATCH_SIZE, "--kg-batch-size", help="KG triples per step."),
    negatives: int = typer.Option(settings.NEGATIVES, "--negatives", help="Corrupted tails per KG triple."),
    epochs: int = typer.Option(settings.EPOCHS, "--epochs", help="Maximum epochs."),
    patience: int = typer.Option(settings.PATIENCE, "--patience", help="Early-stopping patience."),
    eval_k: int = typer.Option(settings.EVAL_K, "--eval-k", help="Cutoff of the validation Recall."),
    seed: int = typer.Option(settings.SEED, "--seed", help="Run seed."),
    separate_item_tables: bool = typer.Option(False, "--separate-item-tables", help="Own item table for the interaction graph."),
    zero_modalities: bool = typer.Option(False, "--zero-modalities", help="Replace every modality feature by zero."),
    baseline: bool = typer.Option(False, "--baseline", help="Interaction graph only: no fusion, no KG loss."),
    grad_check: bool = typer.Option(False, "--grad-check", help="Run the finite-difference gradient check instead."),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker cap (default EMMKGR_THREADS or all cores)."),
):
    """
    Jointly train the graph encoder and the recommender, keeping the best validation epoch.
    """
    with handle_errors():
        run = Run("train", run_dir, dict(locals()), seed)
        fingerprint = graph.read_fingerprint(run.input(graph_dir / FINGERPRINT_FILE))
        fields = dict(
            dim=dim,
            layers=layers,
            knn=fingerprint.knn_n,
            lambda_kg=lambda_kg,
            lr=lr,
            weight_decay=weight_decay,
            bpr_batch_size=bpr_batch_size,
            kg_batch_size=kg_batch_size,
            epochs=epochs,
            patience=patience,
            seed=seed,
            variant=graph.Variant(fingerprint.variant),
            grad_check=grad_check,
            negatives=negatives,
            separate_item_tables=separate_item_tables,
            zero_modalities=zero_modalities,
            eval_k=eval_k,
        )
        try:
            config = trainer.TrainConfig.baseline(**fields) if baseline else trainer.TrainConfig(**fields)
        except ValueError as e:
            raise ConfigurationError(f"Invalid training flags: {e}") from e
        inputs = _load_inputs(run, data_dir, graph_dir, config.variant, seed)
        if inputs.mm_graph.fingerprint.content_hash != fingerprint.content_hash:
            raise ArtifactMismatchError(
                f"{graph_dir / FINGERPRINT_FILE} does not describe the graph rebuilt from {data_dir}"
            )

        if grad_check:
            report = trainer.gradient_check(inputs.store, inputs.mm_graph, inputs.interactions, config)
            atomic_write_text(run.output("grad_check.json"), report.model_dump_json(indent=2) + "\n")
            table = Table(title="Gradient check")
            for column in ("group", "checked", "within 1e-3", "max rel. error", "passed"):
                table.add_column(column)
            for group in report.groups:
                table.add_row(group.name, str(group.checked), f"{group.within_tolerance:.2%}",
                              f"{group.max_relative_error:.3g}", "✅" if group.passed else "❌")
            console.print(table)
            console.print(
                f"{report.checked} coordinates, {report.within_tolerance:.2%} within 1e-3, "
                f"max relative error {report.max_relative_error:.3g}"
            )
            _print_manifest(run)
            if not report.passed:
                raise NumericalError("Analytic gradients disagree with finite differences")
            return

        with run.output(METRICS_FILE).open("w", encoding="utf-8") as stream:
            params, report = trainer.train(
                inputs.store, inputs.mm_graph, inputs.interactions, config, stream, threads=_workers(threads)
            )
        trainer.save_checkpoint(
            params,
            config,
            inputs.mm_graph.fingerprint.digest,
            run.output(CHECKPOINT_FILE),
            epoch=report.best_epoch,
            validation_metric=report.best_metric,
        )
        atomic_write_text(run.output("training_report.json"), report.model_dump_json(indent=2) + "\n")
        console.print(
            f"[bold green]✅ Trained {len(report.epochs)} epochs; best epoch {report.best_epoch} "
            f"with validation Recall@{eval_k} = {report.best_metric}[/bold green]"
        )
        _print_manifest(run)


@app.command("eval-rec")
def eval_rec(
    data_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Dataset directory."),
    graph_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of build-graph."),
    run_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of train."),
    out_dir: Optional[Path] = typer.Option(None, "--out", help="Report directory (default RUN_DIR/eval-rec)."),
    cutoffs: List[int] = typer.Option(list(settings.CUTOFFS), "--cutoff", help="Metric cutoff; repeatable."),
    split: str = typer.Option("test", "--split", help="Split to evaluate: validation or test."),
    baseline: bool = typer.Option(False, "--baseline", help="Rank without multimodal fusion."),
    allow_mismatch: bool = typer.Option(False, "--allow-mismatch", help="Accept a checkpoint trained on another graph."),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker cap (default EMMKGR_THREADS or all cores)."),
):
    """
    Rank every evaluated user's items (train items masked) and report Recall, NDCG and MAP.
    """
    with handle_errors():
        run = Run("eval-rec", out_dir or run_dir / "eval-rec", dict(locals()))
        label = {"validation": datastore.SplitLabel.VALIDATION, "test": datastore.SplitLabel.TEST}.get(split)
        if label is None:
            raise ConfigurationError(f"Unknown split {split!r}; use validation or test")
        cutoffs = _check_cutoffs(cutoffs)
        workers = _workers(threads)
        checkpoint, inputs, snapshot = _load_trained(run, data_dir, graph_dir, run_dir, allow_mismatch)
        run.manifest.seed = checkpoint.config.seed
        fused = checkpoint.config.fusion and not baseline
        relevant_items = inputs.interactions.items_by_user(label)
        users = [u for u, rel in enumerate(relevant_items) if rel.size]
        lists = recommender.recommend_all(
            users, max(cutoffs), snapshot, inputs.interactions.positives(datastore.SplitLabel.TRAIN), fused=fused,
            threads=workers,
        )
        report = evaluator.evaluate_rankings(
            {r.entity: r.items.tolist() for r in lists},
            {u: rel.tolist() for u, rel in enumerate(relevant_items)},
            cutoffs,
            name=f"recommendation/{split}" + ("" if fused else " (no fusion)"),
        )
        recommender.write_rankings(lists, inputs.interactions.user_ids, inputs.store.item_ids, run.output("rankings.tsv"))
        atomic_write_text(run.output("rec_metrics.json"), report.model_dump_json(indent=2) + "\n")
        console.print(evaluator.render_report(report))
        _print_manifest(run)


@app.command("search")
def search_cmd(
    data_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Dataset directory."),
    graph_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of build-graph."),
    run_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of train."),
    queries_path: Path = typer.Argument(..., exists=True, dir_okay=False, help="Query file (JSON lines)."),
    out_dir: Optional[Path] = typer.Option(None, "--out", help="Result directory (default RUN_DIR/search)."),
    top: int = typer.Option(10, "--top", help="Items returned per query."),
    baseline: bool = typer.Option(False, "--baseline", help="Best single-modality match in raw feature space."),
    allow_mismatch: bool = typer.Option(False, "--allow-mismatch", help="Accept a checkpoint trained on another graph."),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker cap (default EMMKGR_THREADS or all cores)."),
):
    """
    Answer vector queries by cosine similarity in the unified item space.
    """
    with handle_errors():
        run = Run("search", out_dir or run_dir / "search", dict(locals()))
        checkpoint, inputs, snapshot = _load_trained(run, data_dir, graph_dir, run_dir, allow_mismatch)
        run.manifest.seed = checkpoint.config.seed
        queries = search.load_queries(run.input(queries_path), inputs.store)
        results = search.search_all(
            queries, checkpoint.params, snapshot, top, baseline=baseline, threads=_workers(threads)
        )
        search.write_results(results, inputs.store.item_ids, run.output("results.tsv"))
        console.print(f"[bold green]✅ Answered {len(results)} queries[/bold green]")
        _print_manifest(run)


def _search_reports(
    queries: search.QuerySet, results: Dict[str, recommender.RankedList], cutoffs: List[int], method: str
) -> List[evaluator.MetricReport]:
    rankings = {qid: r.items.tolist() for qid, r in results.items()}
    reports = [evaluator.evaluate_rankings(rankings, queries.relevant(), cutoffs, name=f"{method}/all")]
    for kind in queries.kinds:
        reports.append(evaluator.evaluate_rankings(rankings, queries.relevant(kind), cutoffs, name=f"{method}/{kind}"))
    return reports


@app.command("eval-search")
def eval_search(
    data_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Dataset directory."),
    graph_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of build-graph."),
    run_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of train."),
    queries_path: Path = typer.Argument(..., exists=True, dir_okay=False, help="Query file (JSON lines)."),
    out_dir: Optional[Path] = typer.Option(None, "--out", help="Report directory (default RUN_DIR/eval-search)."),
    cutoffs: List[int] = typer.Option(list(settings.CUTOFFS), "--cutoff", help="Metric cutoff; repeatable."),
    allow_mismatch: bool = typer.Option(False, "--allow-mismatch", help="Accept a checkpoint trained on another graph."),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker cap (default EMMKGR_THREADS or all cores)."),
):
    """
    Evaluate unified-space search against the vector-based baseline, per query kind.
    """
    with handle_errors():
        run = Run("eval-search", out_dir or run_dir / "eval-search", dict(locals()))
        checkpoint, inputs, snapshot = _load_trained(run, data_dir, graph_dir, run_dir, allow_mismatch)
        run.manifest.seed = checkpoint.config.seed
        queries = search.load_queries(run.input(queries_path), inputs.store)
        cutoffs = _check_cutoffs(cutoffs)
        workers = _workers(threads)
        n_out = max(cutoffs)
        reports = []
        for method, use_baseline in (("unified", False), ("baseline", True)):
            results = search.search_all(
                queries, checkpoint.params, snapshot, n_out, baseline=use_baseline, threads=workers
            )
            reports += _search_reports(queries, results, cutoffs, method)
        payload = {"reports": [r.model_dump(mode="json") for r in reports]}
        atomic_write_text(run.output("search_metrics.json"), json.dumps(payload, indent=2, sort_keys=True) + "\n")
        for report in reports:
            console.print(evaluator.render_report(report))
        _print_manifest(run)


def _cluster_run(run: Run, data_dir: Path, graph_dir: Path, run_dir: Path, k: int, seed: int, allow_mismatch: bool):
    checkpoint, inputs, snapshot = _load_trained(run, data_dir, graph_dir, run_dir, allow_mismatch)
    unified = snapshot.unified if checkpoint.config.fusion else snapshot.item_interaction
    clustering = evaluator.kmeans(unified, k, seed)
    return checkpoint, inputs, snapshot, unified, clustering


@app.command()
def cluster(
    data_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Dataset directory."),
    graph_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of build-graph."),
    run_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of train."),
    out_dir: Optional[Path] = typer.Option(None, "--out", help="Report directory (default RUN_DIR/cluster)."),
    k: int = typer.Option(settings.CLUSTER_K, "--k", help="Number of K-means clusters."),
    seed: int = typer.Option(settings.SEED, "--seed", help="Seed of the K-means stream."),
    allow_mismatch: bool = typer.Option(False, "--allow-mismatch", help="Accept a checkpoint trained on another graph."),
):
    """
    Cluster unified item embeddings and compare intra/inter-cluster cosine per embedding source.
    """
    with handle_errors():
        run = Run("cluster", out_dir or run_dir / "cluster", dict(locals()), seed)
        _, inputs, snapshot, unified, clustering = _cluster_run(run, data_dir, graph_dir, run_dir, k, seed, allow_mismatch)
        sources = {"unified": unified, "multimodal": snapshot.item_multimodal}
        sources.update({f"raw:{tau}": inputs.store.matrix(tau) for tau in inputs.store.modality_types})
        reports = {"kmeans": evaluator.cohesion(sources, clustering.assignments)}
        planted_path = data_dir / datastore.CLUSTERS_FILE
        if planted_path.is_file():
            planted = datastore.read_item_clusters(run.input(planted_path), inputs.store)
            if np.all(planted >= 0):
                reports["planted"] = evaluator.cohesion(sources, planted)
            else:
                logger.warning(f"{planted_path} does not label every item; skipping the planted-cluster report")
        payload = {name: report.model_dump(mode="json") for name, report in reports.items()}
        atomic_write_text(run.output("cohesion.json"), json.dumps(payload, indent=2, sort_keys=True) + "\n")
        for name, report in reports.items():
            table = evaluator.render_cohesion(report)
            table.title = f"{table.title} [{name}]"
            console.print(table)
        _print_manifest(run)


@app.command()
def export(
    data_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Dataset directory."),
    graph_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of build-graph."),
    run_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of train."),
    out_dir: Optional[Path] = typer.Option(None, "--out", help="Export directory (default RUN_DIR/export)."),
    k: int = typer.Option(settings.CLUSTER_K, "--k", help="Number of K-means clusters for the labels."),
    seed: int = typer.Option(settings.SEED, "--seed", help="Seed of the K-means stream."),
    allow_mismatch: bool = typer.Option(False, "--allow-mismatch", help="Accept a checkpoint trained on another graph."),
):
    """
    Write unified item embeddings and cluster labels for external 2-D projection.
    """
    with handle_errors():
        run = Run("export", out_dir or run_dir / "export", dict(locals()), seed)
        _, inputs, snapshot, unified, clustering = _cluster_run(run, data_dir, graph_dir, run_dir, k, seed, allow_mismatch)
        datastore.write_features(unified, run.output("item_embeddings.emfm"))
        datastore.write_features(snapshot.item_multimodal, run.output("multimodal_embeddings.emfm"))
        datastore.write_id_map(inputs.store.item_ids, run.output(datastore.ITEMS_FILE))
        atomic_write_text(
            run.output("clusters.tsv"),
            "".join(f"{ident}\t{int(c)}\n" for ident, c in zip(inputs.store.item_ids, clustering.assignments)),
        )
        console.print(f"[bold green]✅ Exported {unified.shape[0]} item embeddings to {run.out_dir}[/bold green]")
        _print_manifest(run)


@app.command()
def similar(
    data_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Dataset directory."),
    graph_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of build-graph."),
    run_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Output of train."),
    item_id: str = typer.Argument(..., help="Catalog identifier of the anchor item."),
    out_dir: Optional[Path] = typer.Option(None, "--out", help="Result directory (default RUN_DIR/similar)."),
    top: int = typer.Option(10, "--top", help="Neighbors to return."),
    allow_mismatch: bool = typer.Option(False, "--allow-mismatch", help="Accept a checkpoint trained on another graph."),
):
    """
    List the items closest to one item in the unified space.
    """
    with handle_errors():
        run = Run("similar", out_dir or run_dir / "similar", dict(locals()))
        checkpoint, inputs, snapshot = _load_trained(run, data_dir, graph_dir, run_dir, allow_mismatch)
        index = inputs.store.item_index.get(item_id)
        if index is None:
            raise ValidationError(f"Unknown item {item_id!r}")
        vectors = snapshot.unified if checkpoint.config.fusion else snapshot.item_interaction
        ranked = recommender.similar_items(index, top, vectors)
        rows: List[Tuple[int, str, float]] = [
            (rank, inputs.store.item_ids[j], float(s))
            for rank, (j, s) in enumerate(zip(ranked.items, ranked.scores), start=1)
        ]
        atomic_write_text(run.output("similar.tsv"), "".join(f"{item_id}\t{r}\t{i}\t{s:.8g}\n" for r, i, s in rows))
        table = Table(title=f"Items similar to {item_id}")
        table.add_column("rank", justify="right")
        table.add_column("item")
        table.add_column("cosine", justify="right")
        for rank, ident, score in rows:
            table.add_row(str(rank), ident, f"{score:.4f}")
        console.print(table)
        _print_manifest(run)


if __name__ == "__main__":
    app()

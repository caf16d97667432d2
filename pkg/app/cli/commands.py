from __future__ import annotations

"""Interface en ligne de commande.

Chaque sous-commande lit l'expérience (``--workdir``), écrit ses sorties de
façon atomique et ajoute un ``RunRecord`` dans ``experiment.json``.
Toute erreur métier → message sur stderr, code de sortie 1 (2 pour une erreur
d'arguments).
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

from app.core.config import RunConfig, load_config
from app.core.errors import (
    ConfigurationError,
    CorruptionError,
    DimensionError,
    NumericError,
    TrainingError,
    UsageError,
)
from app.core.experiment import Experiment, atomic_write_json
from app.core.models import SpeakerModel, build_model, count_params, model_size_bytes
from app.core.quantizer import DEFAULT_ALPHA, QuantizerConfig, QuantScheme
from app.services import analysis, evaluation, packfile, probe, report, report_pdf
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.corpus import (
    SyntheticCorpus,
    generate_corpus,
    generate_trials,
    load_corpus,
    read_trials,
    save_corpus,
    write_trials,
)
from app.services.training import finetune_quantized, quantization_assignment, train_fp32

logger = logging.getLogger(__name__)

DOMAIN_ERRORS = (
    ConfigurationError,
    CorruptionError,
    DimensionError,
    NumericError,
    TrainingError,
    UsageError,
    FileNotFoundError,
    KeyError,
    ValueError,
)


# -------------------------
# Helpers
# -------------------------

class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.seed: int = int(args.seed)
        self.config: RunConfig = load_config(Path(args.config) if args.config else None)
        self._experiment: Optional[Experiment] = None

    @property
    def experiment(self) -> Experiment:
        """Ouverte (ou créée) au premier accès : `describe` n'écrit rien."""
        if self._experiment is None:
            self._experiment = Experiment.open_or_create(Path(self.args.workdir))
        return self._experiment

    def save(self) -> None:
        if self._experiment is not None:
            self._experiment.save()

    def corpus_path(self, shifted: bool = False) -> Path:
        given = getattr(self.args, "corpus", None)
        if given:
            return Path(given)
        return self.experiment.corpus_dir / ("corpus-shifted.npz" if shifted else "corpus.npz")

    def load_corpus(self) -> SyntheticCorpus:
        return load_corpus(self.corpus_path(bool(getattr(self.args, "shifted", False))))


def _quant_label(model: SpeakerModel) -> Tuple[str, int]:
    quant = model.config.quant
    if not quant:
        return "fp32", 32
    q = next(iter(quant.values()))
    return q.scheme.value, q.bits


def _tag(model: SpeakerModel, suffix: str = "") -> str:
    scheme, bits = _quant_label(model)
    base = f"{model.config.model_id}-{scheme}{bits if scheme != 'fp32' else ''}"
    return f"{base}-{suffix}" if suffix else base


def _write_pack(ctx: Context, model: SpeakerModel, out: Optional[str], tag: str) -> Tuple[Path, int]:
    path = Path(out) if out else ctx.experiment.pack_path(tag)
    nbytes = packfile.pack(model, path)
    packfile.unpack(path)
    expected = model_size_bytes(model.config)
    if nbytes != expected:
        raise CorruptionError(f"Taille du packfile {nbytes} != taille prévue {expected}.")
    return path, nbytes


def _add_quant_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--bits", type=int, required=required, help="Bitwidth (2..8).")
    p.add_argument("--scheme", choices=[s.value for s in QuantScheme], required=required, help="Schéma de quantification.")
    p.add_argument("--alpha", type=float, default=None, help=f"α initial (défaut {DEFAULT_ALPHA}).")


# -------------------------
# Sous-commandes
# -------------------------

def cmd_gen_corpus(ctx: Context) -> Dict[str, Any]:
    cfg = ctx.config.corpus
    if ctx.args.shifted:
        cfg = type(cfg).from_dict({**cfg.to_dict(), "shifted": True})
    corpus = generate_corpus(cfg, ctx.seed)
    path = Path(ctx.args.out) if ctx.args.out else ctx.corpus_path(cfg.shifted)
    save_corpus(path, corpus)
    trials = generate_trials(corpus, ctx.seed, ctx.config.eval.trials_per_speaker)
    trials_path = path.with_name(path.stem + "-trials.txt")
    write_trials(trials_path, trials)
    load_corpus(path)
    ctx.experiment.add_run(
        "gen-corpus",
        outputs={"corpus": path, "trials": trials_path},
        metrics={"train": len(corpus.train), "test": len(corpus.test), "trials": len(trials), "shifted": cfg.shifted},
    )
    return {"corpus": str(path), "trials": str(trials_path)}


def cmd_train(ctx: Context) -> Dict[str, Any]:
    corpus = ctx.load_corpus()
    cfg = ctx.config.train
    if ctx.args.epochs is not None:
        cfg = type(cfg).from_dict({**cfg.to_dict(), "epochs": ctx.args.epochs, "decay_epochs": []})
    model_cfg = ctx.config.with_seed(ctx.seed).model_for_corpus()

    model = build_model(model_cfg)
    tag = _tag(model)
    log_path = ctx.experiment.report_path(f"{tag}-train", ".jsonl")
    if log_path.exists():
        log_path.unlink()
    result = train_fp32(model, corpus, cfg, seed=ctx.seed, log_path=log_path)
    ckpt = ctx.experiment.checkpoint_path(tag)
    save_checkpoint(ckpt, model, result.head, state=result.state, stage="fp32", epoch=cfg.epochs)
    metrics = {"loss": result.losses[-1] if result.losses else None, "accuracy": result.final_accuracy if result.history else None}
    ctx.experiment.add_run("train", model_id=model_cfg.model_id, outputs={"checkpoint": ckpt, "log": log_path}, metrics=metrics)
    return {"checkpoint": str(ckpt), **metrics}


def _quant_config(ctx: Context, base) -> Any:
    d = base.to_dict()
    if ctx.args.bits is not None:
        d["bits"] = ctx.args.bits
    if ctx.args.scheme is not None:
        d["scheme"] = ctx.args.scheme
    if ctx.args.alpha is not None:
        d["alpha_init"] = ctx.args.alpha
    return type(base).from_dict(d)


def cmd_quantize(ctx: Context) -> Dict[str, Any]:
    ck = load_checkpoint(Path(ctx.args.checkpoint))
    if ck.model.quant_layers():
        raise UsageError("quantize attend un point de contrôle pleine précision.")
    cfg = _quant_config(ctx, ctx.config.finetune)
    ck.model.apply_quantization(quantization_assignment(ck.model, cfg))
    tag = _tag(ck.model, "ptq")
    ckpt = ctx.experiment.checkpoint_path(tag)
    save_checkpoint(ckpt, ck.model, ck.head, stage="ptq", epoch=0)
    pack_path, nbytes = _write_pack(ctx, ck.model, ctx.args.out, tag)
    ctx.experiment.add_run(
        "quantize", model_id=ck.model.config.model_id, scheme=cfg.scheme, bits=cfg.bits,
        outputs={"checkpoint": ckpt, "pack": pack_path}, metrics={"size_bytes": nbytes},
    )
    return {"checkpoint": str(ckpt), "pack": str(pack_path), "size_bytes": nbytes}


def cmd_finetune(ctx: Context) -> Dict[str, Any]:
    ck = load_checkpoint(Path(ctx.args.checkpoint))
    corpus = ctx.load_corpus()
    cfg = _quant_config(ctx, ctx.config.finetune)
    if ctx.args.epochs is not None:
        cfg = type(cfg).from_dict({**cfg.to_dict(), "epochs": ctx.args.epochs, "decay_epochs": []})
    if ck.model.quant_layers():
        current = sorted({(q.scheme.value, q.bits) for q in ck.model.config.quant.values()})
        wanted = (QuantScheme.parse(cfg.scheme).value, int(cfg.bits))
        if current != [wanted]:
            raise ConfigurationError(
                f"Le point de contrôle est déjà quantifié en {current} ; --scheme/--bits demandent {wanted}."
            )
    else:
        ck.model.apply_quantization(quantization_assignment(ck.model, cfg))
    tag = _tag(ck.model, "qat")
    log_path = ctx.experiment.report_path(f"{tag}-finetune", ".jsonl")
    if log_path.exists():
        log_path.unlink()
    result = finetune_quantized(ck.model, corpus, cfg, ck.head, seed=ctx.seed, log_path=log_path)
    ckpt = ctx.experiment.checkpoint_path(tag)
    save_checkpoint(ckpt, ck.model, ck.head, state=result.state, stage="qat", epoch=cfg.epochs)
    pack_path, nbytes = _write_pack(ctx, ck.model, None, tag)
    metrics = {
        "loss": result.losses[-1] if result.losses else None,
        "accuracy": result.final_accuracy if result.history else None,
        "alpha": {k: a.item() for k, a in ck.model.alphas().items()},
        "size_bytes": nbytes,
    }
    scheme, bits = _quant_label(ck.model)
    ctx.experiment.add_run(
        "finetune", model_id=ck.model.config.model_id, scheme=scheme, bits=bits,
        outputs={"checkpoint": ckpt, "pack": pack_path, "log": log_path}, metrics=metrics,
    )
    return {"checkpoint": str(ckpt), "pack": str(pack_path), **metrics}


def cmd_eval(ctx: Context) -> Dict[str, Any]:
    ck = load_checkpoint(Path(ctx.args.checkpoint))
    corpus = ctx.load_corpus()
    trials_path = Path(ctx.args.trials) if ctx.args.trials else ctx.corpus_path(ctx.args.shifted).with_name(
        ctx.corpus_path(ctx.args.shifted).stem + "-trials.txt"
    )
    trials = read_trials(trials_path)
    cfg = ctx.config.eval
    if ctx.args.top_k is not None:
        cfg = type(cfg).from_dict({**cfg.to_dict(), "top_k": ctx.args.top_k})
    result = evaluation.evaluate(ck.model, corpus, trials, cfg, normalize=not ctx.args.no_norm)

    scheme, bits = _quant_label(ck.model)
    tag = _tag(ck.model, ck.stage) + ("-shifted" if ctx.args.shifted else "")
    scores_path = Path(ctx.args.out) if ctx.args.out else ctx.experiment.report_path(f"{tag}-scores", ".txt")
    evaluation.write_scores(scores_path, result.scores)
    summary = {
        "model_id": ck.model.config.model_id,
        "stage": ck.stage,
        "scheme": scheme,
        "bits": bits,
        "params": count_params(ck.model.config),
        "size_bytes": model_size_bytes(ck.model.config),
        "size_fp32_bytes": model_size_bytes(ck.model.config.full_precision()),
        "shifted": bool(ctx.args.shifted),
        **result.summary(),
    }
    summary_path = ctx.experiment.report_path(f"{tag}-eval", ".json")
    atomic_write_json(summary_path, summary)
    ctx.experiment.add_run(
        "eval", model_id=summary["model_id"], scheme=scheme, bits=bits,
        outputs={"scores": scores_path, "summary": summary_path}, metrics=summary,
    )
    return {"scores": str(scores_path), "summary": str(summary_path), "eer": result.eer, "eer_norm": result.eer_norm}


def cmd_analyze(ctx: Context) -> Dict[str, Any]:
    ck = load_checkpoint(Path(ctx.args.checkpoint))
    qcfg = None
    if ctx.args.bits is not None or ctx.args.scheme is not None:
        qcfg = QuantizerConfig(
            scheme=QuantScheme.parse(ctx.args.scheme or "uniform"),
            bits=int(ctx.args.bits or 8),
            alpha=float(ctx.args.alpha if ctx.args.alpha is not None else DEFAULT_ALPHA),
        ).validate()
    frames = ctx.config.corpus.train_frames
    records = analysis.layer_report(ck.model, qcfg, input_shape=(frames, ck.model.config.feat_dim))
    histograms = analysis.model_histograms(ck.model, qcfg, ctx.args.bins)
    label = f"{qcfg.scheme.value}{qcfg.bits}" if qcfg else ""
    tag = _tag(ck.model, ck.stage) + (f"-as-{label}" if label else "")
    json_path = ctx.experiment.report_path(f"{tag}-layers", ".json")
    csv_path = ctx.experiment.report_path(f"{tag}-histograms", ".csv")
    analysis.write_layer_report(json_path, records, {"model_id": ck.model.config.model_id, "input_shape": [frames, ck.model.config.feat_dim]})
    analysis.write_histogram_csv(csv_path, histograms)
    scheme, bits = (qcfg.scheme.value, qcfg.bits) if qcfg else _quant_label(ck.model)
    ctx.experiment.add_run(
        "analyze", model_id=ck.model.config.model_id, scheme=scheme, bits=bits,
        outputs={"layers": json_path, "histograms": csv_path}, metrics={"layers": len(records)},
    )
    return {"layers": str(json_path), "histograms": str(csv_path)}


def cmd_pack(ctx: Context) -> Dict[str, Any]:
    ck = load_checkpoint(Path(ctx.args.checkpoint))
    tag = _tag(ck.model, ck.stage)
    path, nbytes = _write_pack(ctx, ck.model, ctx.args.out, tag)
    scheme, bits = _quant_label(ck.model)
    ctx.experiment.add_run(
        "pack", model_id=ck.model.config.model_id, scheme=scheme, bits=bits,
        outputs={"pack": path}, metrics={"size_bytes": nbytes},
    )
    return {"pack": str(path), "size_bytes": nbytes}


def cmd_describe(ctx: Context) -> Dict[str, Any]:
    info = packfile.describe(Path(ctx.args.packfile))
    if ctx.args.out:
        atomic_write_json(Path(ctx.args.out), info)
    return info


def cmd_probe(ctx: Context) -> Dict[str, Any]:
    ck = load_checkpoint(Path(ctx.args.checkpoint))
    corpus = ctx.load_corpus()
    cfg = ctx.config.probe
    data = probe.extract_embeddings(ck.model, corpus.train)
    results = []
    for name in ctx.args.tasks:
        task = probe.build_task(name, data, cfg, ctx.seed)
        results.append(probe.run_probe(task, cfg, ctx.seed))
        if ctx.args.shuffled:
            results.append(probe.run_probe(probe.shuffled(task, ctx.seed), cfg, ctx.seed))
    scheme, bits = _quant_label(ck.model)
    path = ctx.experiment.report_path(f"{_tag(ck.model, ck.stage)}-probe", ".json")
    probe.write_probe_report(path, results, model_id=ck.model.config.model_id, scheme=scheme, bits=bits)
    ctx.experiment.add_run(
        "probe", model_id=ck.model.config.model_id, scheme=scheme, bits=bits,
        outputs={"report": path}, metrics={r.task: r.accuracy for r in results},
    )
    return {"report": str(path), **{r.task: r.accuracy for r in results}}


def cmd_report(ctx: Context) -> Dict[str, Any]:
    if ctx.args.inputs:
        rows = report.rows_from_files([Path(p) for p in ctx.args.inputs])
    else:
        rows = report.rows_from_experiment(ctx.experiment)
    if not rows:
        raise UsageError("Aucune évaluation à comparer (lancer d'abord `eval`).")
    out = {
        "json": ctx.experiment.report_path("report", ".json"),
        "csv": ctx.experiment.report_path("report", ".csv"),
        "pdf": ctx.experiment.report_path("report", ".pdf"),
    }
    report.write_report_json(out["json"], rows)
    report.write_report_csv(out["csv"], rows)
    report_pdf.write_report_pdf(out["pdf"], rows)
    ctx.experiment.add_run("report", outputs=out, metrics={"rows": len(rows)})
    return {k: str(v) for k, v in out.items()}


COMMANDS: Dict[str, Callable[[Context], Dict[str, Any]]] = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "quantize": cmd_quantize,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "pack": cmd_pack,
    "describe": cmd_describe,
    "probe": cmd_probe,
    "report": cmd_report,
}


# -------------------------
# Parser
# -------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Graine unique de toute l'expérience.")
    common.add_argument("--config", default=None, help="Fichier de configuration JSON.")
    common.add_argument("--workdir", default="experiment", help="Dossier de l'expérience.")
    common.add_argument("--verbose", "-v", action="store_true", help="Journal DEBUG.")

    parser = argparse.ArgumentParser(
        prog="qsv",
        description="Entraînement avec quantification (uniforme / puissances de deux) de modèles d'embedding de locuteur.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="Générer le corpus synthétique et ses essais.")
    p.add_argument("--shifted", action="store_true", help="Variante décalée (pente spectrale, autres scènes).")
    p.add_argument("--out", default=None, help="Chemin du corpus (.npz).")

    p = sub.add_parser("train", parents=[common], help="Étape 1 : entraînement pleine précision.")
    p.add_argument("--corpus", default=None)
    p.add_argument("--epochs", type=int, default=None, help="Remplace le nombre d'époques (planning constant).")

    p = sub.add_parser("quantize", parents=[common], help="Quantification post-entraînement + packfile.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="Chemin du packfile.")
    _add_quant_flags(p, required=True)

    p = sub.add_parser("finetune", parents=[common], help="Étape 2 : fine-tuning quantifié.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--epochs", type=int, default=None)
    _add_quant_flags(p, required=True)

    p = sub.add_parser("eval", parents=[common], help="Scores des essais, AS-norm et EER.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--shifted", action="store_true", help="Évaluer sur le corpus décalé.")
    p.add_argument("--trials", default=None, help="Liste d'essais « label enroll test ».")
    p.add_argument("--top-k", dest="top_k", type=int, default=None)
    p.add_argument("--no-norm", dest="no_norm", action="store_true", help="Sans AS-norm.")
    p.add_argument("--out", default=None, help="Fichier de scores.")

    p = sub.add_parser("analyze", parents=[common], help="Rapport par couche (JSON) et histogrammes (CSV).")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS)
    _add_quant_flags(p, required=False)

    p = sub.add_parser("pack", parents=[common], help="Écrire le packfile d'un point de contrôle.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("describe", parents=[common], help="En-tête et enregistrements d'un packfile (JSON).")
    p.add_argument("packfile")
    p.add_argument("--out", default=None)

    p = sub.add_parser("probe", parents=[common], help="Sondes d'information sur les embeddings.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--tasks", nargs="+", choices=list(probe.TASKS), default=list(probe.TASKS))
    p.add_argument("--shuffled", action="store_true", help="Ajouter le contrôle à étiquettes permutées.")

    p = sub.add_parser("report", parents=[common], help="Tableau comparatif JSON / CSV / PDF.")
    p.add_argument("--inputs", nargs="*", default=None, help="Résumés d'évaluation (défaut : runs `eval`).")

    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        ctx = Context(args)
        result = COMMANDS[args.command](ctx)
        ctx.save()
    except DOMAIN_ERRORS as e:
        print(f"{args.command}: erreur : {e}", file=sys.stderr)
        return 1
    print(json.dumps(result, ensure_ascii=False, indent=2, default=str))
    return 0

"""Command line interface: pipeline stages over a self-describing run directory.

Every stage resolves its configuration from defaults, an optional TOML/JSON
config file, and explicit flag overrides (in that precedence order), then
writes the resolved snapshot next to its outputs. Re-running a stage from its
snapshot reproduces the outputs bit-for-bit apart from wall-clock timing
fields. Exit codes: 0 success, 2 usage, 3 configuration, 4 runtime.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .analysis import (
    choice_diff,
    length_binned_bleu,
    shuffle_energy_test,
    spearman_distribution,
    write_choice_diff_csv,
    write_histogram_gnuplot,
    write_json,
    write_length_bins_csv,
)
from .basemodel import ChannelModel, NeuralSeq2Seq, TrainConfig, load_translator, train_mle
from .checkpoint import peek_kind
from .corpus import (
    ParallelCorpus,
    SyntheticTask,
    TokenSeq,
    Vocabulary,
    gen_synthetic,
    load_corpus_text,
    save_corpus_text,
    tokenize,
)
from .energy import EnergyModel
from .errors import EbrError, InvalidConfig
from .lm import MaskedMlpConfig, MaskedMlpScorer, NgramLM, NgramMaskedScorer, train_ngram
from .metrics import BleuConfig
from .rerank import (
    EvalConfig,
    ModelBundle,
    RerankReport,
    SentenceResult,
    Strategy,
    evaluate,
    write_report_json,
)
from .training import (
    MultiCorpusSchedule,
    NceConfig,
    RankTrainConfig,
    ScheduleEntry,
    nce_train,
    rank_train,
    write_trace_csv,
)

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


class ConfigError(Exception):
    pass


class Once(argparse.Action):
    """Value-flag action that rejects repeated occurrences (usage error)."""

    def __call__(self, parser, namespace, values, option_string=None):
        seen = getattr(namespace, "_seen_flags", set())
        if self.dest in seen:
            parser.error(f"duplicate flag {option_string}")
        seen.add(self.dest)
        setattr(namespace, "_seen_flags", seen)
        setattr(namespace, self.dest, values)


STRATEGY_ALIASES = {
    "beam": "beam",
    "sample": "sample_logprob",
    "sample_logprob": "sample_logprob",
    "lm": "lm_fusion",
    "lm_fusion": "lm_fusion",
    "mlm": "mlm_fusion",
    "mlm_fusion": "mlm_fusion",
    "ebr": "ebr",
    "nce-ebr": "nce_ebr",
    "nce_ebr": "nce_ebr",
    "oracle": "oracle",
}

COMMON_DEFAULTS = {"seed": 0, "out": "run"}

STAGE_DEFAULTS = {
    "gen-data": {
        "task": "cipher", "vocab_size": 30, "min_len": 6, "max_len": 12,
        "branching": 4, "cipher_shift": 3, "structure_seed": 7,
        "n_train": 2000, "n_valid": 200, "n_test": 200,
    },
    "train-base": {
        "model": "neural", "embed_dim": 32, "hidden_dim": 64, "epochs": 10,
        "lr": 2e-3, "batch_size": 8, "patience": 3,
        "p_copy": 0.7, "p_substitute": 0.2, "p_insert": 0.05, "p_delete": 0.05,
        "num_substitutes": 1,
    },
    "train-lm": {
        "kind": "ngram", "order": 3, "k_smooth": 0.1, "window": 2,
        "embed_dim": 16, "hidden_dim": 32, "epochs": 5, "lr": 5e-3, "batch_size": 32,
    },
    "train-energy": {
        "objective": "rank", "alpha": 10.0, "T": 1000.0, "k": 100, "gamma": 0.0,
        "lr": 0.01, "batch_size": 8, "epochs": 1, "steps_per_epoch": 0,
        "l2": 0.0, "temp": 1.0, "embed_dim": 64, "hidden_dim": 256,
        "pooling": "conv", "freeze_embeddings": False, "cache_candidates": False,
        "noise_ratio": 1,
    },
    "evaluate": {
        "strategy": "ebr", "k": 100, "temp": 1.0, "width": 5, "lam": 0.01,
        "length_normalize": False, "split": "test",
    },
    "rerank": {
        "strategy": "ebr", "k": 100, "temp": 1.0, "width": 5, "lam": 0.01,
        "length_normalize": False, "split": "test",
        "src_file": "", "ref_file": "", "language_pair": "external",
    },
    "analyze": {
        "what": "spearman", "scorer": "base_logprob", "k": 100, "temp": 1.0,
        "split": "test", "window": 3, "bins": "5,10",
        "report": "", "report_a": "", "report_b": "",
    },
    "sweep": {
        "gamma": "0,0.25,0.75,1.0", "alpha": 10.0, "T": 1000.0, "k": 100,
        "lr": 0.01, "batch_size": 8, "epochs": 1, "steps_per_epoch": 0,
        "l2": 0.0, "temp": 1.0, "embed_dim": 64, "hidden_dim": 256,
        "pooling": "conv", "freeze_embeddings": False, "cache_candidates": False,
        "split": "test",
    },
}


def _add_flags(sp: argparse.ArgumentParser, stage: str) -> None:
    sp.add_argument("--config", action=Once, default=None)
    sp.add_argument("--seed", action=Once, type=int, default=None)
    sp.add_argument("--out", action=Once, default=None)
    for key, default in STAGE_DEFAULTS[stage].items():
        flags = ["--" + key.replace("_", "-")]
        if key == "lam":
            flags = ["--lambda", "--lam"]
        if isinstance(default, bool):
            sp.add_argument(*flags, dest=key, action="store_const", const=True, default=None)
        else:
            sp.add_argument(*flags, dest=key, action=Once, type=type(default), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebr", description=__doc__)
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGE_DEFAULTS:
        _add_flags(sub.add_parser(stage), stage)
    return parser


def load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if p.suffix == ".json":
            return json.loads(p.read_text())
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc


def resolve_config(stage: str, args: argparse.Namespace) -> dict:
    known = dict(COMMON_DEFAULTS)
    known.update(STAGE_DEFAULTS[stage])
    resolved = dict(known)
    if args.config:
        doc = load_config_file(args.config)
        file_stage = doc.pop("stage", stage)
        if file_stage != stage:
            raise ConfigError(f"config snapshot is for stage {file_stage!r}, not {stage!r}")
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} for stage {stage}")
            if not isinstance(value, type(known[key])) and known[key] is not None:
                try:
                    value = type(known[key])(value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
            resolved[key] = value
    for key in known:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            resolved[key] = cli_value
    return resolved


def _snapshot(cfg: dict, stage: str, out: Path) -> None:
    doc = {"stage": stage, **cfg}
    with open(out / f"{stage.replace('-', '_')}_config.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _meta(out: Path) -> dict:
    path = out / "meta.json"
    if not path.exists():
        raise ConfigError(f"run directory {out} has no meta.json; run gen-data first")
    return json.loads(path.read_text())


def _vocab(out: Path) -> Vocabulary:
    return Vocabulary.load(out / "vocab.json")


def _split(out: Path, vocab: Vocabulary, split: str) -> ParallelCorpus:
    meta = _meta(out)
    return load_corpus_text(
        out / f"{split}.src", out / f"{split}.tgt", vocab, meta["language_pair"], split
    )


def _task_from_meta(meta: dict) -> SyntheticTask:
    return SyntheticTask(**meta["task"])


# --- stages -----------------------------------------------------------------


def stage_gen_data(cfg: dict) -> int:
    out = _out_dir(cfg)
    task = SyntheticTask(
        cfg["task"],
        vocab_size=cfg["vocab_size"],
        min_len=cfg["min_len"],
        max_len=cfg["max_len"],
        branching=cfg["branching"],
        cipher_shift=cfg["cipher_shift"],
        structure_seed=cfg["structure_seed"],
    )
    vocab = task.vocabulary()
    vocab.save(out / "vocab.json")
    sizes = {"train": cfg["n_train"], "valid": cfg["n_valid"], "test": cfg["n_test"]}
    for offset, (split, n) in enumerate(sizes.items()):
        corpus = gen_synthetic(task, n, seed=cfg["seed"] * 3 + offset, split=split)
        save_corpus_text(corpus, out / f"{split}.src", out / f"{split}.tgt")
    meta = {
        "language_pair": f"syn-{task.kind}",
        "task": {
            "kind": task.kind, "vocab_size": task.vocab_size, "min_len": task.min_len,
            "max_len": task.max_len, "branching": task.branching,
            "cipher_shift": task.cipher_shift, "structure_seed": task.structure_seed,
        },
        "sizes": sizes,
    }
    write_json(meta, out / "meta.json")
    _snapshot(cfg, "gen-data", out)
    print(f"wrote {sum(sizes.values())} pairs to {out}")
    return 0


def stage_train_base(cfg: dict) -> int:
    out = _out_dir(cfg)
    vocab = _vocab(out)
    meta = _meta(out)
    if cfg["model"] == "channel":
        model = ChannelModel(
            _task_from_meta(meta),
            cfg["p_copy"], cfg["p_substitute"], cfg["p_insert"], cfg["p_delete"],
            cfg["num_substitutes"],
        )
        model.save(out / "base.ckpt", vocab_ref="vocab.json")
        _snapshot(cfg, "train-base", out)
        print("wrote channel base model")
        return 0
    if cfg["model"] != "neural":
        raise ConfigError(f"unknown base model kind {cfg['model']!r}")
    train = _split(out, vocab, "train")
    valid = _split(out, vocab, "valid")
    model = NeuralSeq2Seq(vocab, cfg["embed_dim"], cfg["hidden_dim"], seed=cfg["seed"])
    tc = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        patience=cfg["patience"], seed=cfg["seed"],
    )
    model, history = train_mle(model, train, tc, valid)
    model.save(out / "base.ckpt", vocab_ref="vocab.json")
    write_json({"history": history}, out / "train_base_history.json")
    _snapshot(cfg, "train-base", out)
    print(f"final validation perplexity {history[-1]['valid_ppl']:.3f}")
    return 0


def stage_train_lm(cfg: dict) -> int:
    out = _out_dir(cfg)
    vocab = _vocab(out)
    targets = _split(out, vocab, "train").references()
    if cfg["kind"] == "ngram":
        lm = train_ngram(targets, cfg["order"], cfg["k_smooth"], vocab)
        lm.save(out / "lm.ckpt", vocab_ref="vocab.json")
    elif cfg["kind"] == "masked-ngram":
        ms = NgramMaskedScorer.train(targets, cfg["order"], cfg["k_smooth"], vocab)
        ms.save(out / "mlm.ckpt", vocab_ref="vocab.json")
    elif cfg["kind"] == "masked-mlp":
        mc = MaskedMlpConfig(
            window=cfg["window"], embed_dim=cfg["embed_dim"], hidden_dim=cfg["hidden_dim"],
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
        )
        MaskedMlpScorer(vocab, mc).fit(targets).save(out / "mlm.ckpt", vocab_ref="vocab.json")
    else:
        raise ConfigError(f"unknown lm kind {cfg['kind']!r}")
    _snapshot(cfg, "train-lm", out)
    print(f"wrote {cfg['kind']} scorer")
    return 0


def _energy_from_cfg(cfg: dict, vocab: Vocabulary) -> EnergyModel:
    return EnergyModel(
        vocab,
        embed_dim=cfg["embed_dim"],
        hidden_dim=cfg["hidden_dim"],
        pooling=cfg["pooling"],
        freeze_embeddings=cfg["freeze_embeddings"],
        l2=cfg["l2"],
        seed=cfg["seed"],
    )


def _rank_cfg(cfg: dict, gamma: float) -> RankTrainConfig:
    return RankTrainConfig(
        alpha=cfg["alpha"], temperature=cfg["T"], k=cfg["k"], gamma=gamma,
        lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
        steps_per_epoch=cfg["steps_per_epoch"] or None, l2=cfg["l2"],
        sample_temp=cfg["temp"], cache_candidates=cfg["cache_candidates"],
        seed=cfg["seed"],
    )


def stage_train_energy(cfg: dict) -> int:
    out = _out_dir(cfg)
    vocab = _vocab(out)
    meta = _meta(out)
    train = _split(out, vocab, "train")
    base = load_translator(out / "base.ckpt", vocab)
    energy = _energy_from_cfg(cfg, vocab)
    if cfg["objective"] == "rank":
        schedule = MultiCorpusSchedule([ScheduleEntry(meta["language_pair"], train, base)])
        result = rank_train(energy, schedule, _rank_cfg(cfg, cfg["gamma"]))
        write_trace_csv(result.rows, out / "trace.csv")
        write_json(
            {"epoch_losses": result.epoch_losses, "counters": result.counters},
            out / "train_energy_summary.json",
        )
    elif cfg["objective"] == "nce":
        nc = NceConfig(
            noise_ratio=cfg["noise_ratio"], lr=cfg["lr"], batch_size=cfg["batch_size"],
            epochs=cfg["epochs"], sample_temp=cfg["temp"], seed=cfg["seed"],
        )
        result = nce_train(energy, train, base, nc)
        write_trace_csv(result.rows, out / "trace.csv")
        write_json({"epoch_losses": result.epoch_losses}, out / "train_energy_summary.json")
    else:
        raise ConfigError(f"unknown objective {cfg['objective']!r}")
    energy.save(out / "energy.ckpt", vocab_ref="vocab.json")
    _snapshot(cfg, "train-energy", out)
    print(f"final epoch mean loss {result.epoch_losses[-1]:.4f}")
    return 0


def _bundle(out: Path, vocab: Vocabulary) -> ModelBundle:
    bundle = ModelBundle()
    base_path = out / "base.ckpt"
    if base_path.exists():
        bundle.base = load_translator(base_path, vocab)
    if (out / "lm.ckpt").exists():
        bundle.lm = NgramLM.load(out / "lm.ckpt", vocab)
    mlm_path = out / "mlm.ckpt"
    if mlm_path.exists():
        if peek_kind(mlm_path) == "masked_mlp":
            bundle.mlm = MaskedMlpScorer.load(mlm_path, vocab)
        else:
            bundle.mlm = NgramMaskedScorer.load(mlm_path, vocab)
    if (out / "energy.ckpt").exists():
        bundle.energy = EnergyModel.load(out / "energy.ckpt", vocab)
    return bundle


def _strategy(cfg: dict) -> tuple[Strategy, str]:
    name = cfg["strategy"]
    kind = STRATEGY_ALIASES.get(name)
    if kind is None:
        raise ConfigError(f"unknown strategy {name!r}")
    return (
        Strategy(kind, width=cfg["width"], lam=cfg["lam"], length_normalize=cfg["length_normalize"]),
        name.replace("-", "_"),
    )


def _evaluate_into(cfg: dict, out: Path, corpus: ParallelCorpus) -> RerankReport:
    vocab = _vocab(out)
    strategy, label = _strategy(cfg)
    bundle = _bundle(out, vocab, strategy.kind)
    ec = EvalConfig(k=cfg["k"], temp=cfg["temp"], seed=cfg["seed"])
    report = evaluate(corpus, strategy, bundle, ec)
    write_report_json(report, out / f"report_{label}.json")
    print(
        f"strategy={report.strategy} corpus={report.corpus} bleu={report.bleu:.2f} "
        f"sec/sentence={report.mean_seconds_per_sentence:.4f}"
    )
    return report


def stage_evaluate(cfg: dict) -> int:
    out = _out_dir(cfg)
    corpus = _split(out, _vocab(out), cfg["split"])
    _evaluate_into(cfg, out, corpus)
    _snapshot(cfg, "evaluate", out)
    return 0


def stage_rerank(cfg: dict) -> int:
    out = _out_dir(cfg)
    vocab = _vocab(out)
    if cfg["src_file"]:
        if not cfg["ref_file"]:
            raise ConfigError("rerank on external files needs --ref-file as well")
        corpus = load_corpus_text(
            cfg["src_file"], cfg["ref_file"], vocab, cfg["language_pair"], "test"
        )
    else:
        corpus = _split(out, vocab, cfg["split"])
    _evaluate_into(cfg, out, corpus)
    _snapshot(cfg, "rerank", out)
    return 0


def _report_from_json(path, vocab: Vocabulary) -> RerankReport:
    doc = json.loads(Path(path).read_text())
    sentences = [
        SentenceResult(
            src=tokenize(s["src"], vocab),
            ref=tokenize(s["ref"], vocab),
            chosen=tokenize(s["chosen"], vocab) if s["chosen"] else TokenSeq((), ""),
            scores=[],
            chosen_bleu=s["chosen_bleu"],
            seconds=0.0,
        )
        for s in doc["per_sentence"]
    ]
    return RerankReport(doc["strategy"], doc["corpus"], doc["bleu"], sentences, 0.0)


def stage_analyze(cfg: dict) -> int:
    out = _out_dir(cfg)
    vocab = _vocab(out)
    what = cfg["what"]
    if what == "spearman":
        corpus = _split(out, vocab, cfg["split"])
        base = load_translator(out / "base.ckpt", vocab)
        energy = None
        if cfg["scorer"] == "energy":
            energy = EnergyModel.load(out / "energy.ckpt", vocab)
        dist = spearman_distribution(
            corpus, base, cfg["scorer"], cfg["k"], cfg["seed"], energy=energy, temp=cfg["temp"]
        )
        label = f"spearman_{cfg['scorer']}"
        write_json(dist.to_json(), out / f"{label}.json")
        write_histogram_gnuplot(dist, out / f"{label}.dat")
        with open(out / f"{label}.csv", "w", encoding="utf-8") as fh:
            fh.write("bin_low,bin_high,count\n")
            for i, c in enumerate(dist.counts):
                fh.write(f"{dist.bin_edges[i]!r},{dist.bin_edges[i + 1]!r},{int(c)}\n")
        print(f"mean rho {dist.mean_rho:.4f} over {len(dist.rhos)} sentences ({dist.excluded} excluded)")
    elif what == "length-bins":
        if not cfg["report"]:
            raise ConfigError("length-bins needs --report <report.json>")
        report = _report_from_json(cfg["report"], vocab)
        bins = [int(b) for b in cfg["bins"].split(",") if b]
        rows = length_binned_bleu(report, bins)
        write_length_bins_csv(rows, out / "length_bins.csv")
        write_json(
            {"bins": [{"bin": r.label, "count": r.count, "bleu": r.bleu} for r in rows]},
            out / "length_bins.json",
        )
        print(" ".join(f"{r.label}:{'-' if r.bleu is None else f'{r.bleu:.2f}'}" for r in rows))
    elif what == "shuffle":
        energy = EnergyModel.load(out / "energy.ckpt", vocab)
        corpus = _split(out, vocab, cfg["split"])
        report = shuffle_energy_test(energy, corpus.references(), cfg["window"], cfg["seed"])
        write_json(report.to_json(), out / "shuffle.json")
        with open(out / "shuffle.csv", "w", encoding="utf-8") as fh:
            fh.write("variant,mean_energy,preference\n")
            fh.write(f"original,{report.mean_original!r},\n")
            fh.write(f"local,{report.mean_local!r},{report.preference_local!r}\n")
            fh.write(f"global,{report.mean_global!r},{report.preference_global!r}\n")
        print(
            f"preference: local {report.preference_local} global {report.preference_global} "
            f"(local skipped {report.local_skipped})"
        )
    elif what == "choice-diff":
        if not cfg["report_a"] or not cfg["report_b"]:
            raise ConfigError("choice-diff needs --report-a and --report-b")
        a = _report_from_json(cfg["report_a"], vocab)
        b = _report_from_json(cfg["report_b"], vocab)
        rows = choice_diff(a, b)
        write_choice_diff_csv(rows, out / "choice_diff.csv")
        write_json(
            {"rows": [vars(r) for r in rows], "disagreements": len(rows)},
            out / "choice_diff.json",
        )
        print(f"{len(rows)} differing choices")
    else:
        raise ConfigError(f"unknown analysis {what!r}")
    _snapshot(cfg, "analyze", out)
    return 0


def stage_sweep(cfg: dict) -> int:
    out = _out_dir(cfg)
    vocab = _vocab(out)
    meta = _meta(out)
    train = _split(out, vocab, "train")
    eval_corpus = _split(out, vocab, cfg["split"])
    base = load_translator(out / "base.ckpt", vocab)
    try:
        gammas = [float(g) for g in cfg["gamma"].split(",") if g != ""]
    except ValueError as exc:
        raise ConfigError(f"bad gamma list {cfg['gamma']!r}") from exc
    if not gammas:
        raise ConfigError("gamma sweep needs at least one value")
    results = []
    for gamma in gammas:
        energy = _energy_from_cfg(cfg, vocab)
        schedule = MultiCorpusSchedule([ScheduleEntry(meta["language_pair"], train, base)])
        rank_train(energy, schedule, _rank_cfg(cfg, gamma))
        tag = f"{gamma:g}".replace(".", "p")
        energy.save(out / f"energy_gamma{tag}.ckpt", vocab_ref="vocab.json")
        bundle = _bundle(out, vocab, "ebr")
        bundle.energy = energy
        report = evaluate(
            eval_corpus,
            Strategy("ebr"),
            bundle,
            EvalConfig(k=cfg["k"], temp=cfg["temp"], seed=cfg["seed"]),
        )
        write_report_json(report, out / f"report_ebr_gamma{tag}.json")
        results.append({"gamma": gamma, "bleu": report.bleu})
        print(f"gamma={gamma:g} bleu={report.bleu:.2f}")
    write_json({"results": results}, out / "sweep.json")
    _snapshot(cfg, "sweep", out)
    return 0


STAGES = {
    "gen-data": stage_gen_data,
    "train-base": stage_train_base,
    "train-lm": stage_train_lm,
    "train-energy": stage_train_energy,
    "evaluate": stage_evaluate,
    "rerank": stage_rerank,
    "analyze": stage_analyze,
    "sweep": stage_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.stage, args)
    except ConfigError as exc:
        print(f"ebr: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return STAGES[args.stage](cfg)
    except ConfigError as exc:
        print(f"ebr: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EbrError, FileNotFoundError) as exc:
        print(f"ebr: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

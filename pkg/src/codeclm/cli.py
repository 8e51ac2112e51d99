"""``codeclm`` command-line entry point.

Every command writes its artifacts plus one ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 configuration error, 3 missing or invalid data,
4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .codec import CodecConfig, distortion, load_codebooks, save_codebooks, train_codebooks
from .corpus import CorpusConfig, gen_splits, gen_unlabeled, load_corpus, save_corpus
from .evaluation import STRATEGIES, ModelEntry, SamplingConfig, SynthesisContext, run_benchmark
from .integration import load_composed, load_lm, load_nar, load_valle_ar, save_composed, save_lm, save_nar, save_valle_ar
from .numeric import NumericError, configure_threads
from .pipeline import (
    ABLATION_PRESETS,
    MICRO_BUDGET,
    AblationBudget,
    DataBundle,
    ExperimentConfig,
    MissingArtifact,
    Prerequisites,
    StageConfig,
    TrainingLog,
    continual_from,
    pretrain_nar,
    pretrain_text_lm,
    pretrain_valle,
    report_meta,
    run_ablation,
    run_experiment,
    validate_experiment,
)

logger = logging.getLogger("codeclm")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


def _take(cfg: dict, allowed: set[str], where: str) -> dict:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(allowed)}")
    return cfg


def _prepare_out(out: str, force: bool) -> Path:
    d = Path(out)
    if d.exists() and not d.is_dir():
        raise ConfigError(f"--out {out} exists and is not a directory")
    if d.exists() and any(d.iterdir()) and not force:
        raise ConfigError(f"--out {out} is not empty; pass --force to overwrite")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _git_describe() -> str:
    try:
        r = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
        return r.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, argv: list[str], config: dict, seed: int, started: float, threads: int) -> dict:
    artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    manifest = {
        "command": ["codeclm", *argv],
        "argv": list(argv),
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "threads": threads,
        "git_describe": _git_describe(),
        "version": __version__,
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _need_dir(path: str | None, flag: str, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required: {what}")
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"missing artifact: {what} directory {path} does not exist")
    return p


def _need_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise DataError(f"missing artifact: {what} ({path})")
    return path


def load_corpus_dir(path: Path, with_unlabeled: bool = False) -> tuple[CorpusConfig, object, object, object]:
    cfg = CorpusConfig.from_dict(json.loads(_need_file(path / "corpus_config.json", "corpus config").read_text()))
    splits = ["train", "eval"] + (["unlabeled"] if with_unlabeled else [])
    loaded = {}
    for name in splits:
        _need_file(path / f"{name}.jsonl", f"{name} split")
        loaded[name] = load_corpus(path, name, cfg)
    return cfg, loaded["train"], loaded["eval"], loaded.get("unlabeled")


def load_codec_dir(path: Path) -> tuple[CodecConfig, list[np.ndarray]]:
    meta = json.loads(_need_file(path / "codec.json", "codec config").read_text())
    books = load_codebooks(_need_file(path / "codebooks.ckpt", "codebooks"))
    return CodecConfig(**meta["codec"]), books


def _data_bundle(args, with_unlabeled: bool = False) -> DataBundle:
    _, train, ev, unl = load_corpus_dir(_need_dir(args.data, "--data", "corpus"), with_unlabeled)
    codec, books = load_codec_dir(_need_dir(args.codec, "--codec", "codec"))
    if books[0].shape[1] != train.config.frame_dim:
        raise DataError("codec frame dimension does not match the corpus")
    return DataBundle(train, ev, books, codec, unl)


def _stage_from(cfg: dict, seed: int, default_steps: int) -> StageConfig:
    keys = {f.name for f in fields(StageConfig)}
    st = {k: cfg[k] for k in keys if k in cfg}
    st.setdefault("steps", default_steps)
    st["seed"] = seed
    return StageConfig(**st)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> tuple[dict, int]:
    raw = _read_json(args.config)
    cfg_dict = {**CorpusConfig().to_dict(), **_take(raw, set(CorpusConfig().to_dict()), "corpus config")}
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = CorpusConfig.from_dict(cfg_dict)
    n_train = args.utterances
    n_eval = args.eval_utterances if args.eval_utterances is not None else max(1, n_train // 10)
    n_unl = args.unlabeled if args.unlabeled is not None else n_train
    out = args.out_dir
    train, ev = gen_splits(cfg, n_train, n_eval)
    save_corpus(train, out, "train")
    save_corpus(ev, out, "eval")
    if n_unl > 0:
        save_corpus(gen_unlabeled(cfg, n_unl), out, "unlabeled")
    (out / "corpus_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train / {len(ev)} eval / {n_unl} unlabeled utterances to {out}")
    return {"corpus": cfg.to_dict(), "train": n_train, "eval": n_eval, "unlabeled": n_unl}, cfg.seed


TRAIN_KEYS = {
    "codec": {"num_layers", "codebook_size", "frames_per_second", "iters"},
    "lm-pretrain": {"steps", "batch_frames", "max_lr", "warmup_steps", "lm_preset", "text_count"},
    "valle": {"steps", "batch_frames", "max_lr", "warmup_steps", "valle_preset", "nar_steps"},
    "continual": {"steps", "batch_frames", "max_lr", "warmup_steps", "freeze_text"},
    "tts": {"steps", "batch_frames", "max_lr", "warmup_steps", "lm_preset", "valle_preset", "valle_init", "valle_adapter", "lora_rank", "text_loss"},
}
BRIDGE_KEYS = {"valle_preset", "valle_init", "valle_adapter"}


def cmd_train(args) -> tuple[dict, int]:
    stage = args.stage
    raw = _take(_read_json(args.config), TRAIN_KEYS[stage], f"--stage {stage} config")
    seed = args.seed if args.seed is not None else 0
    out = args.out_dir
    if stage == "codec":
        _, train, _, _ = load_corpus_dir(_need_dir(args.data, "--data", "corpus"))
        iters = raw.get("iters", 25)
        codec = CodecConfig(
            raw.get("num_layers", 4), raw.get("codebook_size", 128), train.config.frame_dim, raw.get("frames_per_second", 4)
        )
        books = train_codebooks(train.all_frames(), codec, iters, seed)
        save_codebooks(out / "codebooks.ckpt", books)
        (out / "codec.json").write_text(json.dumps({"codec": codec.to_dict(), "iters": iters}, indent=2, sort_keys=True) + "\n")
        dist = [distortion(train.all_frames(), books, n) for n in range(1, codec.num_layers + 1)]
        print("distortion by layers used:", " ".join(f"{d:.5f}" for d in dist))
        return {"stage": stage, "codec": codec.to_dict(), "iters": iters}, seed

    data = _data_bundle(args, with_unlabeled=stage == "continual")
    if stage == "lm-pretrain":
        st = _stage_from(raw, seed, 2000)
        name = raw.get("lm_preset", "tiny")
        lm, log = pretrain_text_lm(name, data, st, raw.get("text_count", 4000), checkpoint_dir=out / "checkpoint", dump_dir=out)
        save_lm(lm, out)
        log.write(out / "train_log.csv")
        return {"stage": stage, "lm_preset": name, "text_count": raw.get("text_count", 4000), "train": st.to_dict()}, seed

    if stage == "valle":
        st = _stage_from(raw, seed, 3000)
        nar_st = StageConfig(**{**asdict(st), "steps": raw.get("nar_steps", st.steps)})
        name = raw.get("valle_preset", "tiny")
        ar, log = pretrain_valle(data, name, st, checkpoint_dir=out / "checkpoint", dump_dir=out)
        nar, nlog = pretrain_nar(data, name, nar_st, dump_dir=out)
        save_valle_ar(ar, out)
        save_nar(nar, out)
        log.write(out / "train_log.csv")
        nlog.write(out / "nar_train_log.csv")
        return {"stage": stage, "valle_preset": name, "train": st.to_dict(), "nar_train": nar_st.to_dict()}, seed

    if stage == "continual":
        st = _stage_from(raw, seed, 2000)
        lm_dir = _need_dir(args.lm, "--lm", "text-pretrained LM")
        base = load_lm(lm_dir)
        lm, log = continual_from(base, data, st, raw.get("freeze_text", False), checkpoint_dir=out / "checkpoint", dump_dir=out)
        save_lm(lm, out)
        log.write(out / "train_log.csv")
        return {"stage": stage, "lm": str(lm_dir), "freeze_text": raw.get("freeze_text", False), "train": st.to_dict()}, seed

    # tts
    if args.method is None:
        raise ConfigError("--method is required for --stage tts")
    method = args.method
    conflicts = []
    if method == "a":
        if args.valle is not None:
            conflicts.append("method a takes no codec LM (--valle given)")
        bridge_keys = sorted(BRIDGE_KEYS & set(raw))
        if bridge_keys:
            conflicts.append(f"method a has no bridge or codec LM; config sets {bridge_keys}")
    exp = ExperimentConfig(
        method=method,
        lm_preset=raw.get("lm_preset", "tiny"),
        valle_preset=raw.get("valle_preset", "tiny"),
        init=args.init or "pretrained",
        adapter=args.adapter or ("lora" if method != "a" else "full"),
        valle_init=raw.get("valle_init", "pretrained"),
        valle_adapter=raw.get("valle_adapter", "lora"),
        lora_rank=raw.get("lora_rank", 8),
        train=_stage_from(raw, seed, 3000),
        seed=seed,
        text_loss=raw.get("text_loss", False),
    )
    conflicts += validate_experiment(exp)
    if conflicts:
        raise ConfigError("invalid method/adapter combination: " + "; ".join(conflicts))
    pre = Prerequisites()
    if method != "valle" and exp.init == "pretrained":
        pre.lm[exp.lm_preset] = load_lm(_need_dir(args.lm, "--lm", "text-pretrained LM (needed by --init pretrained)"))
    if exp.init == "continual":
        pre.continual[exp.lm_preset] = load_lm(_need_dir(args.continual, "--continual", "continually pre-trained LM (needed by --init continual)"))
    if method in ("b", "c", "valle") and exp.valle_init == "pretrained":
        pre.valle_ar = load_valle_ar(_need_dir(args.valle, "--valle", "pre-trained codec LM"))
    model, log = run_experiment(exp, data, pre, checkpoint_dir=out / "checkpoint", dump_dir=out)
    save_composed(model, out)
    log.write(out / "train_log.csv")
    (out / "experiment.json").write_text(json.dumps(exp.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{exp.label}: loss {log.losses[0]:.4f} -> {np.mean(log.losses[-20:]):.4f} over {len(log.losses)} steps")
    return {"stage": stage, "experiment": exp.to_dict()}, seed


def _parse_strategies(text: str) -> list[str]:
    names = {"1": "I", "2": "II", "3": "III", "I": "I", "II": "II", "III": "III"}
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok not in names:
            raise ConfigError(f"unknown strategy {tok!r}; use 1,2,3")
        if names[tok] not in out:
            out.append(names[tok])
    return [s for s in STRATEGIES if s in out]


def cmd_eval(args) -> tuple[dict, int]:
    strategies = _parse_strategies(args.strategies)
    if args.pool < 1 or args.seeds < 1:
        raise ConfigError("--pool and --seeds must be >= 1")
    model_dirs = [m for m in args.models.split(",") if m]
    if not model_dirs:
        raise ConfigError("--models lists no model directories")
    for m in model_dirs:
        if not (Path(m) / "composition.json").is_file():
            raise DataError(f"missing model: {m} (no composition.json)")
    data = _data_bundle(args)
    nar = load_nar(_need_dir(args.valle, "--valle", "directory holding the non-autoregressive codec LM"))
    entries = []
    for m in model_dirs:
        model = load_composed(m)
        exp_path = Path(m) / "experiment.json"
        meta = report_meta(ExperimentConfig.from_dict(json.loads(exp_path.read_text()))) if exp_path.is_file() else {}
        entries.append(ModelEntry(Path(m).name, model, meta))
    ctx = SynthesisContext(nar, data.books, data.train.templates, data.prompt_frames, data.corpus_config.frames_per_phoneme[1])
    seed0 = args.seed if args.seed is not None else 0
    seeds = list(range(seed0, seed0 + args.seeds))
    sampling = SamplingConfig(top_p=args.top_p, temperature=args.temperature)
    res = run_benchmark(
        entries, ctx, data.eval, {u.id for u in data.train.utterances}, strategies, args.pool, seeds, args.max_texts, sampling
    )
    out = args.out_dir
    (out / "benchmark.csv").write_text(res.csv())
    (out / "benchmark.txt").write_text(res.table())
    _write_per_text(out / "per_text.csv", res.per_text)
    print(res.table(), end="")
    print(f"dominance violations: {len(res.violations)}")
    if res.violations:
        raise NumericError(f"{len(res.violations)} strategy dominance violations")
    cfg = {
        "models": model_dirs, "strategies": strategies, "pool": args.pool, "seeds": seeds,
        "max_texts": args.max_texts, "top_p": args.top_p, "temperature": args.temperature,
    }
    return cfg, seed0


def _write_per_text(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0])
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


def cmd_ablation(args) -> tuple[dict, int]:
    if args.preset not in ABLATION_PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; valid presets: {', '.join(ABLATION_PRESETS)}")
    raw = _read_json(args.config)
    base = MICRO_BUDGET if args.budget == "micro" else AblationBudget()
    budget_dict = {**asdict(base), **_take(raw, set(asdict(base)), "ablation budget")}
    budget_dict["seeds"] = tuple(budget_dict["seeds"])
    budget = AblationBudget(**budget_dict)
    data = _data_bundle(args, with_unlabeled=args.preset == "continual")
    pre = Prerequisites()
    pre.nar = load_nar(_need_dir(args.valle, "--valle", "directory holding the non-autoregressive codec LM"))
    if (Path(args.valle) / "valle_ar.json").is_file():
        pre.valle_ar = load_valle_ar(args.valle)
    report = run_ablation(args.preset, data, pre, budget, progress=lambda m: print(m, flush=True))
    out = args.out_dir
    (out / f"{args.preset}.csv").write_text(report.csv())
    (out / f"{args.preset}.txt").write_text(report.table())
    for tag, log in report.logs.items():
        log.write(out / f"train_log_{tag.replace('/', '_').replace(' ', '').replace('(', '').replace(')', '')}.csv")
    print(report.table(), end="")
    print(f"dominance violations: {len(report.violations)}")
    if report.violations:
        raise NumericError(f"{len(report.violations)} strategy dominance violations")
    return {"preset": args.preset, "budget": {**budget_dict, "seeds": list(budget.seeds)}}, 0


def cmd_replay(args) -> tuple[dict, int] | int:
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if "--force" not in argv:
        argv.append("--force")
    return main(argv)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="codeclm", description="Desk-scale codec-LM text-to-speech experiments.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True, help="output directory (gets a manifest.json)")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="random seed (0 when omitted)")

    g = sub.add_parser("gen-corpus", help="generate the synthetic corpus", formatter_class=fmt)
    common(g)
    g.add_argument("--config", default=None, help="JSON corpus config; built-in default when omitted")
    g.add_argument("--utterances", type=int, default=2000, help="training utterances")
    g.add_argument("--eval-utterances", type=int, default=None, help="eval utterances (default: utterances/10)")
    g.add_argument("--unlabeled", type=int, default=None, help="unlabeled utterances (default: utterances)")

    t = sub.add_parser("train", help="train one stage", formatter_class=fmt)
    common(t)
    t.add_argument("--stage", required=True, choices=["codec", "lm-pretrain", "valle", "continual", "tts"])
    t.add_argument("--method", choices=["a", "b", "c", "valle"], default=None, help="integration method (tts stage)")
    t.add_argument("--init", choices=["scratch", "pretrained", "continual"], default=None, help="LM initialization (tts stage; default pretrained)")
    t.add_argument("--adapter", choices=["lora", "full"], default=None, help="LM adaptation (tts stage; default full for a, lora otherwise)")
    t.add_argument("--config", default=None, help="JSON stage config")
    t.add_argument("--data", default=None, help="corpus directory from gen-corpus")
    t.add_argument("--codec", default=None, help="codec directory from --stage codec")
    t.add_argument("--lm", default=None, help="text-pretrained LM directory")
    t.add_argument("--continual", default=None, help="continually pre-trained LM directory")
    t.add_argument("--valle", default=None, help="pre-trained codec LM directory")

    e = sub.add_parser("eval", help="benchmark trained models", formatter_class=fmt)
    common(e)
    e.add_argument("--models", required=True, help="comma-separated model directories from `train --stage tts`")
    e.add_argument("--strategies", default="1,2,3", help="subset of 1,2,3")
    e.add_argument("--pool", type=int, default=5, help="candidates per text")
    e.add_argument("--seeds", type=int, default=3, help="number of sampling seeds")
    e.add_argument("--max-texts", type=int, default=None, help="evaluate only the first N eval utterances")
    e.add_argument("--top-p", type=float, default=1.0)
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--data", default=None, help="corpus directory")
    e.add_argument("--codec", default=None, help="codec directory")
    e.add_argument("--valle", default=None, help="codec LM directory (supplies the non-autoregressive model)")

    a = sub.add_parser("ablation", help="run an ablation grid", formatter_class=fmt)
    common(a, seed=False)
    a.add_argument("--preset", required=True, help=f"one of {', '.join(ABLATION_PRESETS)}")
    a.add_argument("--budget", choices=["desk", "micro"], default="desk", help="step/eval budget")
    a.add_argument("--config", default=None, help="JSON overrides of the budget")
    a.add_argument("--data", default=None)
    a.add_argument("--codec", default=None)
    a.add_argument("--valle", default=None, help="codec LM directory (non-autoregressive model required)")

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest", formatter_class=fmt)
    r.add_argument("manifest", help="path to a manifest.json")
    return p


COMMANDS = {"gen-corpus": cmd_gen_corpus, "train": cmd_train, "eval": cmd_eval, "ablation": cmd_ablation}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    threads = configure_threads()
    try:
        if args.command == "replay":
            return cmd_replay(args)
        started = time.time()
        args.out_dir = _prepare_out(args.out, args.force)
        config, seed = COMMANDS[args.command](args)
        write_manifest(args.out_dir, argv, config, seed, started, threads)
        return EXIT_OK
    except (DataError, MissingArtifact, FileNotFoundError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

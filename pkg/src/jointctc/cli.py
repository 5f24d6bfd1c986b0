"""Command-line experiment runner.

    python -m jointctc gen-data --config exp.json
    python -m jointctc train --config exp.json
    python -m jointctc decode --config exp.json [--split test]
    python -m jointctc evaluate --results run/results.jsonl --refs data/test.tsv
    python -m jointctc sweep --config exp.json
    python -m jointctc oracle-check

Every stage writes into ``<output_dir>/<stage>-<hash>/`` where the hash
covers the resolved configuration of that stage and everything upstream.
A stage whose directory already holds a completion marker is skipped.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 failed acceptance check.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import re
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import SPLITS, SyntheticTaskSpec, gen_corpus, read_corpus, write_splits
from .decoding import DecodeConfig, decode_corpus
from .metrics import EvalReport, evaluate_hypotheses, monotonicity
from .model import ModelConfig, cross_attention_maps, encode, init_params, load_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("jointctc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
DONE = "DONE"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

TOP_KEYS = {"task", "model", "train", "decode", "sweep", "output_dir", "seed"}
SWEEP_KEYS = {"length_penalty", "beam", "ctc_weight", "modes"}


@dataclass
class ExperimentConfig:
    task: SyntheticTaskSpec
    model: dict  # ModelConfig keys; vocabulary sizes are filled in from the task
    train: TrainConfig
    decode: list
    sweep: dict = field(default_factory=dict)
    output_dir: str = "runs"
    seed: int = 0

    def model_config(self) -> ModelConfig:
        d = dict(self.model)
        d.setdefault("task", "st" if self.task.task == "frames" else "mt")
        d["src_vocab"] = self.task.model_src_vocab
        d["transcript_vocab"] = self.task.transcript_vocab
        d["tgt_vocab"] = self.task.tgt_vocab
        return ModelConfig.from_dict(d)

    def resolved(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "model": self.model_config().to_dict(),
            "train": self.train.to_dict(),
            "decode": [dc.to_dict() for dc in self.decode],
            "sweep": self.sweep,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def _check_keys(obj: dict, allowed: set, where: str, text: str, src: str) -> None:
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"{src}:{_line_of(text, k)}: unknown key {k!r} in {where}; "
                              f"allowed: {', '.join(sorted(allowed))}")


def parse_config(text: str, src: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    """Parse a JSON experiment file; unknown keys and bad values are reported with line numbers."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{src}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{src}:1: top level must be an object")
    for k, v in (overrides or {}).items():
        raw[k] = v
    _check_keys(raw, TOP_KEYS, "experiment", text, src)
    seed = int(raw.get("seed", 0))
    sections = {"task": SyntheticTaskSpec, "model": ModelConfig, "train": TrainConfig}
    for name, cls in sections.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{src}:{_line_of(text, name)}: {name!r} must be an object")
        _check_keys(sec, set(cls.__dataclass_fields__), name, text, src)
    try:
        task = SyntheticTaskSpec.from_dict({"seed": seed, **raw.get("task", {})})
        tr = TrainConfig.from_dict({"seed": seed, **raw.get("train", {})})
        decs = raw.get("decode", [{}])
        if isinstance(decs, dict):
            decs = [decs]
        for d in decs:
            _check_keys(d, set(DecodeConfig.__dataclass_fields__), "decode", text, src)
        dcs = [DecodeConfig.from_dict(d) for d in decs]
        sweep = raw.get("sweep", {})
        _check_keys(sweep, SWEEP_KEYS, "sweep", text, src)
        for k, v in sweep.items():
            if not isinstance(v, list) or not v:
                raise ConfigError(f"{src}:{_line_of(text, k)}: sweep axis {k!r} must be a nonempty list")
        exp = ExperimentConfig(task, dict(raw.get("model", {})), tr, dcs, sweep,
                               str(raw.get("output_dir", "runs")), seed)
        exp.model_config()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{src}: {e}") from e
    return exp


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{path}: no such config file")
    return parse_config(p.read_text(encoding="utf-8"), str(path), overrides)


# ---------------------------------------------------------------------------
# run-stamped stages
# ---------------------------------------------------------------------------


def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:12]


def _stage_dir(exp: ExperimentConfig, stage: str, payload: dict) -> tuple[Path, bool]:
    d = Path(exp.output_dir) / f"{stage}-{content_hash(payload)}"
    done = (d / DONE).exists()
    if not done:
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return d, done


def _finish(d: Path) -> None:
    (d / DONE).write_text("ok\n")


def stage_data(exp: ExperimentConfig) -> Path:
    payload = {"task": exp.task.to_dict()}
    d, done = _stage_dir(exp, "data", payload)
    if done:
        log.info("data up to date: %s", d)
        return d
    write_splits(d, gen_corpus(exp.task))
    _finish(d)
    return d


def stage_train(exp: ExperimentConfig) -> Path:
    data_dir = stage_data(exp)
    cfg = exp.model_config()
    payload = {"task": exp.task.to_dict(), "model": cfg.to_dict(), "train": exp.train.to_dict(),
               "init_seed": exp.seed}
    d, done = _stage_dir(exp, "train", payload)
    if done:
        log.info("train up to date: %s", d)
        return d
    log_path = d / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    params = init_params(cfg, exp.seed)
    train(params, cfg, read_corpus(data_dir / "train.tsv"), read_corpus(data_dir / "valid.tsv"),
          exp.train, out_dir=d, log_path=log_path)
    _finish(d)
    return d


def stage_decode(exp: ExperimentConfig, configs=None, split: str = "test", tag: str = "decode",
                 limit: int | None = None) -> Path:
    """Decode ``split`` (its first ``limit`` examples if given) under every config."""
    train_dir = stage_train(exp)
    data_dir = stage_data(exp)
    configs = list(configs if configs is not None else exp.decode)
    payload = {"train": content_hash(json.loads((train_dir / "config.json").read_text())),
               "split": split, "decode": [c.to_dict() for c in configs]}
    if limit is not None:
        payload["limit"] = limit
    d, done = _stage_dir(exp, tag, payload)
    if done:
        log.info("%s up to date: %s", tag, d)
        return d
    params, cfg, _ = load_checkpoint(train_dir / "best.ckpt")
    examples = read_corpus(data_dir / f"{split}.tsv")[:limit]
    decode_corpus(params, cfg, examples, configs, out_dir=d)
    _finish(d)
    return d


def sweep_configs(exp: ExperimentConfig) -> list[DecodeConfig]:
    base = exp.decode[0] if exp.decode else DecodeConfig()
    modes = exp.sweep.get("modes", sorted({dc.mode for dc in exp.decode}) or [base.mode])
    axes = [exp.sweep.get("beam", [base.beam_size]),
            exp.sweep.get("ctc_weight", [base.ctc_weight]),
            exp.sweep.get("length_penalty", [base.length_penalty])]
    out = []
    for mode, b, w, lp in itertools.product(modes, *axes):
        out.append(replace(base, mode=mode, beam_size=int(b), ctc_weight=float(w), length_penalty=float(lp),
                           prebeam=None if base.prebeam is None else max(base.prebeam, int(b))))
    return out


def stage_sweep(exp: ExperimentConfig, limit: int | None = None) -> Path:
    d = stage_decode(exp, sweep_configs(exp), tag="sweep", limit=limit)
    rows = list(csv.DictReader(open(d / "summary.csv", encoding="utf-8")))
    # one (BLEU, length ratio) series per mode along the penalty axis
    with open(d / "penalty_series.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mode", "beam", "ctc_weight", "length_penalty", "bleu", "length_ratio"])
        for r in rows:
            w.writerow([r["mode"], r["beam"], r["ctc_weight"], r["length_penalty"], r["bleu"], r["length_ratio"]])
    return d


# ---------------------------------------------------------------------------
# evaluation of stored results
# ---------------------------------------------------------------------------


def layer_monotonicity(params, cfg, examples, normalized: bool = False) -> list[float]:
    """Mean monotonicity per decoder layer (heads averaged), teacher-forced on the references."""
    totals = np.zeros(cfg.n_dec_layers)
    n = 0
    for ex in examples:
        if not ex.target:
            continue
        enc = encode(params, cfg, ex.source)
        maps = cross_attention_maps(params, cfg, enc.h_tgt, ex.target)
        totals += [monotonicity(m.mean(axis=0), normalized) for m in maps]
        n += 1
    return (totals / max(n, 1)).tolist()


def evaluate_results(results_path, refs_path, checkpoint=None) -> list[tuple[dict, EvalReport]]:
    refs = read_corpus(refs_path)
    groups: dict[tuple, list] = {}
    for line in open(results_path, encoding="utf-8"):
        if line.strip():
            r = json.loads(line)
            groups.setdefault((r["mode"], r.get("beam"), r.get("length_penalty")), []).append(r)
    mono = []
    if checkpoint is not None:
        params, cfg, _ = load_checkpoint(checkpoint)
        mono = layer_monotonicity(params, cfg, refs)
    out = []
    for (mode, beam, lp), recs in groups.items():
        hyps, tgts = [], []
        for r in recs:
            idx = int(r["id"])
            if not 0 <= idx < len(refs):
                raise ValueError(f"result id {r['id']!r} has no reference")
            hyps.append(tuple(r["tokens"]))
            tgts.append(refs[idx].target)
        rep = evaluate_hypotheses(hyps, tgts, None, mono,
                                  {"logadds": sum(r["logadds"] for r in recs),
                                   "nanos": sum(r["nanos"] for r in recs)})
        out.append(({"mode": mode, "beam": beam, "length_penalty": lp}, rep))
    return out


# ---------------------------------------------------------------------------
# oracle suite
# ---------------------------------------------------------------------------


def run_oracle_suite(n_cases: int = 50, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Cross-check the dynamic programmes and searches against enumeration."""
    from .ctc import PosteriorGrid, ctc_logprob, viterbi_align
    from .decoding import decode
    from .oracle import (SyntheticAttention, brute_best_path, brute_ctc, brute_prefix_mass,
                         brute_sequence_masses, exhaustive_joint_argmax, random_case)
    from .prefix import frontier_masses, insync_run, outsync_extend, outsync_initial

    rng = np.random.default_rng(seed)
    checks = []

    def record(name, errs, tol):
        worst = max(errs) if errs else 0.0
        checks.append((name, worst <= tol, f"max abs diff {worst:.2e} (tol {tol:g})"))

    e1, e2, e3, e4 = [], [], [], []
    for _ in range(n_cases):
        grid, y = random_case(rng, max_T=7, max_V=4, max_L=3)
        e1.append(abs(ctc_logprob(grid, y) - brute_ctc(grid, y)))
        e2.append(abs(viterbi_align(grid, y).logp - brute_best_path(grid, y)))
        st = outsync_initial(grid.logp, grid.blank_id)
        for c in y:
            st = outsync_extend(st, c, grid)
        e3.append(abs(st.pscore - brute_prefix_mass(grid, y)))
        masses = brute_sequence_masses(grid)
        got = frontier_masses(insync_run(grid))
        e4.append(max(abs(got.get(k, -np.inf) - v) if np.isfinite(v) else 0.0 for k, v in masses.items()))
    record("ctc forward vs path enumeration", e1, 1e-9)
    record("viterbi vs best enumerated path", e2, 1e-9)
    record("output-sync prefix score vs enumeration", e3, 1e-9)
    record("input-sync masses vs enumeration", e4, 1e-9)

    misses = 0
    for i in range(n_cases // 2):
        T = int(rng.integers(1, 5))
        grid = PosteriorGrid.random(rng, T, 4)
        attn = SyntheticAttention(4, seed=i)
        lam = float(rng.choice([0.3, 0.5, 1.0]))
        best, _, _ = exhaustive_joint_argmax(grid, attn, lam, 0.0, max_len=4)
        for mode in ("joint-osync", "joint-isync"):
            dc = DecodeConfig(mode, beam_size=200, prebeam=200, ctc_weight=lam)
            if decode(grid, attn, dc, max_len=4).tokens != best:
                misses += 1
    checks.append(("full-width joint searches vs exhaustive argmax", misses == 0, f"{misses} mismatches"))
    return checks


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _overrides(ns) -> dict:
    out = {}
    if getattr(ns, "seed", None) is not None:
        out["seed"] = ns.seed
    if getattr(ns, "output_dir", None) is not None:
        out["output_dir"] = ns.output_dir
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jointctc", description="Joint CTC/attention experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON experiment file")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--output-dir", help="override output_dir")
        return p

    with_config(sub.add_parser("gen-data", help="write train/valid/test corpora"))
    with_config(sub.add_parser("train", help="train a model (generates data if needed)"))
    p = with_config(sub.add_parser("decode", help="decode a split with every configured mode"))
    p.add_argument("--split", default="test", choices=SPLITS)
    p = sub.add_parser("evaluate", help="score a results file against references")
    p.add_argument("--results", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--checkpoint", help="also report per-layer attention monotonicity")
    p.add_argument("--out", help="write the reports here (CSV + JSON lines)")
    with_config(sub.add_parser("sweep", help="decode over the sweep axes"))
    p = sub.add_parser("oracle-check", help="cross-check against brute-force references")
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if ns.cmd == "oracle-check":
            t0 = time.time()
            checks = run_oracle_suite(ns.cases, ns.seed)
            for name, ok, detail in checks:
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
            print(f"{sum(ok for _, ok, _ in checks)}/{len(checks)} passed in {time.time() - t0:.1f}s")
            return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_CHECK
        if ns.cmd == "evaluate":
            reports = evaluate_results(ns.results, ns.refs, ns.checkpoint)
            for key, rep in reports:
                print(json.dumps({**key, **rep.flat()}, sort_keys=True))
                if ns.out:
                    Path(ns.out).mkdir(parents=True, exist_ok=True)
                    tag = f"{key['mode']}_b{key['beam']}_lp{key['length_penalty']}"
                    rep.write_csv(Path(ns.out) / f"report_{tag}.csv")
                    rep.write_jsonl(Path(ns.out) / "reports.jsonl")
            return EXIT_OK
        exp = load_config(ns.config, _overrides(ns))
        if ns.cmd == "gen-data":
            d = stage_data(exp)
        elif ns.cmd == "train":
            d = stage_train(exp)
        elif ns.cmd == "decode":
            d = stage_decode(exp, split=ns.split)
        else:
            d = stage_sweep(exp)
        print(d)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``train``, ``diagnose``, ``heatmap`` and ``gradcheck``.

Every command is deterministic given its inputs and writes plain files
(JSON lines, CSV, PGM, binary checkpoints) meant for external plotting.
Exit codes are listed in :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import infotheory as it
from . import tensor as tc
from .losses import WeightScheme, total_loss
from .model import ModelConfig, count_params, forward, init_params
from .training import (
    TaskSpec,
    Task,
    TrainConfig,
    TrainingError,
    MetricsTrace,
    alignment_matrix,
    frozen,
    metadata,
    synth_batch,
    train,
)

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_PARSE = 2
EXIT_DIVERGED = 3
EXIT_BUDGET = 4
EXIT_MISMATCH = 5
EXIT_OVERSIZE = 6
EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_CHECK: "check failure",
    EXIT_PARSE: "parse error",
    EXIT_DIVERGED: "divergence",
    EXIT_BUDGET: "enumeration budget exceeded",
    EXIT_MISMATCH: "checkpoint/config mismatch",
    EXIT_OVERSIZE: "model too large for gradient check",
}

GRADCHECK_MAX_PARAMS = 50_000
GRADCHECK_TOL = 1e-4
GRADCHECK_ROWS = 2
GRADCHECK_H = 1e-5
HEATMAP_SAMPLES = 64
_HEATMAP_TAG = 0x4EA7


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

# section -> key -> converter
_SCHEMA: dict[str, dict[str, str]] = {
    "task": {f.name: f.type for f in fields(TaskSpec)},
    "model": {"d_model": "int", "n_layers": "int", "n_heads": "int", "seed": "int"},
    "train": {
        "steps": "int", "batch_size": "int", "lr": "float", "momentum": "float",
        "eval_interval": "int", "seed": "int",
    },
    "loss": {"variant": "str", "scheme": "str", "c": "float", "text_source": "str", "vista_scale": "float"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec
    train: TrainConfig
    config_hash: str

    @property
    def seeds(self) -> dict[str, int]:
        return {"task": self.task.seed, "model": self.train.model.seed, "train": self.train.seed}


def _locate(text: str, section: str, key: str | None = None) -> int | None:
    """1-based line of ``key`` in ``section`` (or of the section header)."""
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section:
            m = re.match(r"([^=:\s]+)\s*[=:]", line)
            if m and m.group(1).lower() == key:
                return no
    return None


def _convert(kind: str, value: str):
    if kind == "int":
        return int(value, 0)
    if kind == "float":
        v = float(value)
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {value!r}")
        return v
    return value.strip()


def parse_experiment_config(text: str) -> ExperimentConfig:
    """Parse an INI experiment description; every failure names its line."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line) from None
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]", _locate(text, section))
        values[section] = {}
        for key, raw in cp.items(section):
            kind = _SCHEMA[section].get(key)
            if kind is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]", _locate(text, section, key))
            try:
                values[section][key] = _convert(kind, raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}", _locate(text, section, key)) from None

    def build(section, fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}", _locate(text, section)) from None

    task = build("task", lambda: TaskSpec(**values.get("task", {})))
    train_kw = dict(values.get("train", {}))
    model_kw = dict(values.get("model", {}))
    model_kw.setdefault("seed", train_kw.get("seed", 0))
    model = build("model", lambda: task.model_config(**model_kw))
    loss = dict(values.get("loss", {}))
    scheme = build("loss", lambda: WeightScheme(loss.pop("scheme", "normalized"), loss.pop("c", 1.0)))
    cfg = build("train", lambda: TrainConfig(model=model, scheme=scheme, **train_kw, **loss))
    digest = hashlib.sha256(text.encode()).hexdigest()
    return ExperimentConfig(task, cfg, digest)


def load_experiment_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_experiment_config(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_train(config_path, out_dir) -> int:
    try:
        exp = load_experiment_config(config_path)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_PARSE
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = metadata(exp.config_hash)
    trace = MetricsTrace()
    try:
        with np.errstate(all="ignore"):
            res = train(exp.task, exp.train, on_eval=trace.records.append)
    except TrainingError as exc:
        (out / "metrics.jsonl").write_text(trace.to_jsonl(meta) if trace.records else "")
        _err(f"training diverged: {exc}")
        return EXIT_DIVERGED
    (out / "metrics.jsonl").write_text(res.trace.to_jsonl(meta))
    checkpoint.save(out / "final.ckpt", res.config.model, res.params)
    manifest = {
        "version": __version__,
        "config_hash": exp.config_hash,
        "seeds": exp.seeds,
        "steps": exp.train.steps,
        "variant": exp.train.variant,
        "scheme": str(exp.train.scheme),
        "files": {name: _sha256_file(out / name) for name in ("metrics.jsonl", "final.ckpt")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    last = res.trace.records[-1]
    print(f"step {last.step}: ce={last.ce:.6g} vista={last.vista:.6g} total={last.total:.6g} "
          f"mean_alignment={last.mean_alignment:.6g}")
    return EXIT_OK


def _diagnose_checks(curve: it.InfoCurve, vocab_size: int) -> list[tuple[str, str, str]]:
    """(name, PASS|FAIL|SKIP, detail) for each verified statement."""
    checks = []
    if curve.nondegenerate:
        slack = curve.H_prefix - (curve.t - 1) * curve.delta_H
        checks.append(("entropy-growth", "PASS" if slack.min() >= -1e-9 else "FAIL",
                       f"min H_prefix-(t-1)*delta_H = {slack.min():.3e}"))
    else:
        checks.append(("entropy-growth", "SKIP", "degenerate model (delta_H = 0)"))
    lo, hi = curve.I_vis.min(), curve.I_vis.max()
    ok = lo >= -1e-12 and hi <= math.log(vocab_size) + 1e-9
    checks.append(("visual-mi-bound", "PASS" if ok else "FAIL",
                   f"I_vis in [{lo:.3e}, {hi:.6g}], ln|V| = {math.log(vocab_size):.6g}"))
    err = max(curve.entropy_chain_err, curve.mi_chain_err)
    checks.append(("chain-rule", "PASS" if err <= 1e-10 else "FAIL",
                   f"entropy {curve.entropy_chain_err:.3e}, mutual information {curve.mi_chain_err:.3e}"))
    worst, tested = math.inf, 0
    for iv, ic, lam in zip(curve.I_vis, curve.I_cond, curve.lambdas):
        if iv > 0 and lam > 0:
            r = it.rho_lower_bound_check(iv, max(ic, 0.0), lam)
            worst = min(worst, r.rho - r.bound)
            tested += 1
    if tested:
        checks.append(("rho-bound", "PASS" if worst >= -1e-12 else "FAIL",
                       f"min rho - bound = {worst:.3e} over {tested} positions"))
    else:
        checks.append(("rho-bound", "SKIP", "no position with visual information"))
    return checks


def cmd_diagnose(model_arg: str, horizon: int | None, epsilon: float, out_csv) -> int:
    if model_arg in it.BUILTINS:
        model = it.builtin_model(model_arg)
        source = it.format_sequence_model(model)
    else:
        try:
            source = Path(model_arg).read_text()
            model = it.parse_sequence_model(source, name=Path(model_arg).stem)
        except (OSError, UnicodeDecodeError, it.ModelFormatError) as exc:
            _err(f"cannot load model {model_arg!r}: {exc}")
            return EXIT_PARSE
    T = model.horizon if horizon is None else horizon
    if T < 1:
        _err("horizon must be >= 1")
        return EXIT_PARSE
    if not (math.isfinite(epsilon) and epsilon >= 0):
        _err("epsilon must be finite and >= 0")
        return EXIT_PARSE
    try:
        curve = it.alignment_ratio_curve(model, T, epsilon)
    except it.CapacityError as exc:
        _err(str(exc))
        return EXIT_BUDGET
    meta = {
        "version": __version__,
        "config_hash": hashlib.sha256(source.encode()).hexdigest(),
        "model": model.name or model_arg,
        "horizon": T,
        "epsilon": f"{epsilon:.17g}",
        "delta_H": f"{curve.delta_H:.17g}",
        "C": f"{curve.C:.17g}",
        "nondegenerate": str(curve.nondegenerate).lower(),
    }
    with open(out_csv, "w", newline="") as fh:
        it.write_curve_csv(curve, fh, meta)
    checks = _diagnose_checks(curve, model.vocab_size)
    for name, status, detail in checks:
        print(f"{status} {name}: {detail}")
    return EXIT_CHECK if any(s == "FAIL" for _, s, _ in checks) else EXIT_OK


def heatmap_matrix(params, cfg: ModelConfig, task: Task, seed: int, samples: int = HEATMAP_SAMPLES,
                   text_source: str = "embedding") -> np.ndarray:
    """Mean over ``samples`` captions of cos(text position t, image position j), shape (m, n)."""
    batch, _ = synth_batch(task, np.random.default_rng([seed, _HEATMAP_TAG]), samples)
    out = forward(frozen(params), cfg, batch)
    x = out.text_repr(text_source).data
    img = out.image_hidden.data
    sims = np.stack([alignment_matrix(x, img[:, j]) for j in range(img.shape[1])], axis=-1)
    return sims.mean(axis=0)


def pgm_bytes(sim: np.ndarray) -> bytes:
    """8-bit grayscale: byte = round-half-up(255*(sim+1)/2), clamped to 0..255."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ValueError("similarity matrix must be 2-D")
    m, n = sim.shape
    px = np.clip(np.floor(255.0 * (sim + 1.0) / 2.0 + 0.5), 0, 255).astype(np.uint8)
    return f"P5\n{n} {m}\n255\n".encode() + px.tobytes()


def _write_matrix_csv(path: Path, rows, meta: dict) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" for v in np.atleast_1d(row)) + "\n")


def cmd_heatmap(ckpt_path, seed: int, out_prefix, config_path=None) -> int:
    try:
        cfg, params = checkpoint.load(ckpt_path)
    except OSError as exc:
        _err(f"cannot read checkpoint: {exc}")
        return EXIT_PARSE
    except checkpoint.CheckpointError as exc:
        _err(f"checkpoint does not match its header: {exc}")
        return EXIT_MISMATCH
    if not 0 <= seed < 2**64:
        _err("seed must be an unsigned 64-bit integer")
        return EXIT_PARSE
    text_source = "embedding"
    if config_path is not None:
        try:
            exp = load_experiment_config(config_path)
        except ConfigError as exc:
            _err(str(exc))
            return EXIT_PARSE
        if exp.train.model != cfg:
            _err("checkpoint was not produced by this config")
            return EXIT_MISMATCH
        spec = TaskSpec(**{**exp.task.__dict__, "seed": seed})
        text_source = exp.train.text_source
    else:
        spec = TaskSpec(vocab_size=cfg.vocab_size, text_len=cfg.max_text_len,
                        n_image_tokens=cfg.n_image_tokens, d_image_feat=cfg.d_image_feat, seed=seed)
    sim = heatmap_matrix(params, cfg, Task.build(spec), seed, text_source=text_source)
    m, n = sim.shape
    if (m, n) != (cfg.max_text_len, cfg.n_image_tokens):
        _err(f"heatmap shape {(m, n)} does not match checkpoint")
        return EXIT_MISMATCH
    meta = {
        "version": __version__,
        "config_hash": _sha256_file(Path(ckpt_path)),
        "seed": seed,
        "samples": HEATMAP_SAMPLES,
        "text_source": text_source,
        "shape": f"{m}x{n} (text position x image position)",
    }
    prefix = str(out_prefix)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    _write_matrix_csv(Path(prefix + ".csv"), sim, meta)
    _write_matrix_csv(Path(prefix + ".mean.csv"), sim.mean(axis=0)[:, None],
                      {**meta, "shape": f"{n} (image position, mean over text positions)"})
    Path(prefix + ".pgm").write_bytes(pgm_bytes(sim))
    print(f"wrote {prefix}.csv, {prefix}.mean.csv, {prefix}.pgm")
    return EXIT_OK


def gradcheck_cases(scheme: WeightScheme) -> list[tuple[str, WeightScheme | None]]:
    """(variant, scheme) pairs to check; ``None`` marks a skipped case."""
    cases = []
    for variant in ("l2", "cosine"):
        for s in (WeightScheme("normalized"), WeightScheme("linear"), WeightScheme("uniform", scheme.c)):
            skip = s.variant == "uniform" and s.c == 0
            cases.append((variant, None if skip else s))
    return cases


def cmd_gradcheck(config_path) -> int:
    try:
        exp = load_experiment_config(config_path)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_PARSE
    cfg = exp.train.model
    size = count_params(cfg)
    if size > GRADCHECK_MAX_PARAMS:
        _err(f"{size} parameters exceeds the gradient-check limit of {GRADCHECK_MAX_PARAMS}")
        return EXIT_OVERSIZE
    params = init_params(cfg)
    batch, _ = synth_batch(Task.build(exp.task), np.random.default_rng(exp.train.seed), GRADCHECK_ROWS)
    cases = []
    for variant, scheme in gradcheck_cases(exp.train.scheme):
        if scheme is None:
            print(f"SKIP {variant} uniform(0): alignment term is identically zero")
        else:
            cases.append((variant, scheme))

    def losses():
        # one forward serves every case
        out = forward(params, cfg, batch)
        return [total_loss(out, batch, s, v, exp.train.text_source).loss for v, s in cases]

    errors = tc.grad_check_many(losses, list(params.values()), h=GRADCHECK_H)
    for (variant, scheme), err in zip(cases, errors):
        status = "PASS" if err < GRADCHECK_TOL else "FAIL"
        print(f"{status} {variant} {scheme}: max relative error {err:.3e}")
    worst = max(errors)
    print(f"parameters {size}, worst {worst:.3e}, tolerance {GRADCHECK_TOL:g}")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_CHECK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 already; keep message format
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    codes = "; ".join(f"{k} {v}" for k, v in EXIT_CODES.items())
    p = _Parser(prog="vistalign", description="Toy vision-text alignment experiments.",
                epilog=f"exit codes: {codes}")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a toy model from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")

    d = sub.add_parser("diagnose", help="exact information-theory diagnostics of a discrete model")
    d.add_argument("--model", required=True, help=f"model file or builtin ({', '.join(it.BUILTINS)})")
    d.add_argument("--horizon", type=int, default=None, help="sequence length T (default: model horizon)")
    d.add_argument("--epsilon", type=float, default=0.01)
    d.add_argument("--out", required=True, help="output CSV")

    h = sub.add_parser("heatmap", help="text-to-image cosine similarity map of a checkpoint")
    h.add_argument("--ckpt", required=True)
    h.add_argument("--seed", type=_u64, required=True, help="task seed")
    h.add_argument("--out", required=True, help="output prefix")
    h.add_argument("--config", default=None, help="experiment config the checkpoint was trained with")

    g = sub.add_parser("gradcheck", help="finite-difference check of the composite loss gradient")
    g.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train":
        return cmd_train(args.config, args.out)
    if args.command == "diagnose":
        return cmd_diagnose(args.model, args.horizon, args.epsilon, args.out)
    if args.command == "heatmap":
        return cmd_heatmap(args.ckpt, args.seed, args.out, args.config)
    return cmd_gradcheck(args.config)


if __name__ == "__main__":
    sys.exit(main())

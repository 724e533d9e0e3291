"""Command-line pipeline: corpus -> training -> embeddings -> scores -> report.

All commands share a workspace directory (``--out-dir``)::

    <out-dir>/corpus/                       gen-corpus
    <out-dir>/runs/<system>/checkpoint.npz  train (+ history.json, run.json)
    <out-dir>/runs/<system>/embeddings.npz  extract
    <out-dir>/runs/<system>/scores.<backend>.<condition>.txt   score
    <out-dir>/metrics.<backend>.csv         report
    <out-dir>/runs/<system>/filters.csv     export-filters

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import backend as be
from . import corpus
from . import frontend as fe
from . import gradcheck
from . import metrics
from . import network as net

logger = logging.getLogger("rawspk")

CONFIG_VERSION = 1
CONDITIONS = {"matched": ("eval_clean", "matched.trials"),
              "mismatched": ("eval_degraded", "mismatched.trials")}
BACKENDS = ("cosine", "plda")
SYSTEMS = ("mel", "tdf", "tdf+H", "tdf+VD", "tdf+H+VD", "tdf+H+BD", "tdf+H+GD",
           "sinc", "sinc+H")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    front_end: str = "tdf"
    analytic: bool = False
    dropout: str = "none"
    backend: str = "cosine"
    seed: int = 0
    out_dir: str = "."
    speakers: int = 20
    utts_per_speaker: int = 10
    duration: float = 1.0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    n_boot: int = 1000

    def validate(self):
        if self.front_end not in net.FRONT_ENDS:
            raise UsageError(f"--front-end must be one of {', '.join(net.FRONT_ENDS)}")
        if self.dropout not in net.DROPOUTS:
            raise UsageError(f"--dropout must be one of {', '.join(net.DROPOUTS)}")
        if self.backend not in BACKENDS:
            raise UsageError(f"--backend must be one of {', '.join(BACKENDS)}")
        if self.analytic and self.front_end == "mel":
            raise UsageError("--analytic conflicts with --front-end mel "
                             "(mel features have no learnable filters)")
        if self.dropout != "none" and self.front_end != "tdf":
            raise UsageError(f"--dropout {self.dropout} conflicts with --front-end "
                             f"{self.front_end} (dropout applies to tdf filters only)")
        if self.speakers < 4:
            raise UsageError("--speakers must be >= 4 (>= 2 train and 2 eval speakers)")
        if self.epochs < 0:
            raise UsageError("--epochs must be >= 0")
        return self

    @property
    def system(self):
        return net.system_name(self.front_end, self.analytic, self.dropout)

    @classmethod
    def from_system(cls, name, **overrides):
        """Parse a system name such as ``tdf+H+VD`` or ``sinc+H``."""
        parts = name.split("+")
        front_end, rest = parts[0].lower(), parts[1:]
        analytic = bool(rest) and rest[0] == "H"
        if analytic:
            rest = rest[1:]
        if len(rest) > 1:
            raise UsageError(f"unrecognised system name {name!r}")
        dropout = rest[0].lower() if rest else "none"
        cfg = cls(front_end=front_end, analytic=analytic, dropout=dropout, **overrides)
        cfg.validate()
        if cfg.system != name:
            raise UsageError(f"unrecognised system name {name!r}")
        return cfg


def load_config_file(path):
    """Flat JSON object with a ``version`` key; unknown keys are rejected."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config {path}: not valid JSON ({exc.msg})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"--config {path}: expected a flat JSON object")
    if data.pop("version", None) != CONFIG_VERSION:
        raise UsageError(f"--config {path}: missing or unsupported version (expected {CONFIG_VERSION})")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"--config {path}: unknown keys {', '.join(unknown)}")
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise UsageError(f"--config {path}: key {key!r} must be a scalar")
    return data


def resolve_config(args):
    """Defaults < config file < explicit flags."""
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    return cfg.validate()


# ------------------------------------------------------------------ paths


def corpus_dir(cfg):
    return os.path.join(cfg.out_dir, "corpus")


def run_dir(cfg, system=None):
    return os.path.join(cfg.out_dir, "runs", system or cfg.system)


def _require(path, hint):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} not found; {hint}")
    return path


# --------------------------------------------------------------- commands


def cmd_gen_corpus(cfg):
    protocol = corpus.build_protocol(cfg.speakers, cfg.utts_per_speaker, 0.5,
                                     seed=cfg.seed, duration_s=cfg.duration)
    corpus.write_corpus(protocol, corpus_dir(cfg))
    print(f"wrote {len(protocol.train)} train / {len(protocol.eval_clean)} eval utterances "
          f"to {corpus_dir(cfg)}")


def _train_data(root):
    utts = corpus.load_split(root, "train")
    speakers = sorted({u.speaker_id for u in utts})
    labels = np.array([speakers.index(u.speaker_id) for u in utts])
    return utts, speakers, labels


def cmd_train(cfg):
    root = _require(corpus_dir(cfg), "run gen-corpus first")
    utts, speakers, labels = _train_data(root)
    enc = net.EncoderConfig(n_speakers=len(speakers))
    model = net.build_model(enc, cfg.front_end, cfg.analytic, cfg.dropout, seed=cfg.seed)
    tcfg = net.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    history = net.train(model, [u.waveform for u in utts], labels, tcfg,
                        log=lambda h: logger.info("epoch %(epoch)d loss %(loss).4f acc %(accuracy).3f", h))
    if any(not math.isfinite(h["loss"]) for h in history) or not all(
            np.all(np.isfinite(p.data)) for p in model.params.values()):
        raise NumericError("training diverged (non-finite loss or parameters)")
    out = run_dir(cfg)
    os.makedirs(out, exist_ok=True)
    net.save_checkpoint(model, os.path.join(out, "checkpoint.npz"))
    _write_json(os.path.join(out, "history.json"), history)
    _write_json(os.path.join(out, "run.json"), asdict(cfg))
    final = history[-1] if history else {"loss": float("nan"), "accuracy": float("nan")}
    print(f"{cfg.system}: trained {cfg.epochs} epochs, final loss {final['loss']:.4f}, "
          f"accuracy {final['accuracy']:.3f} -> {out}")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_model(out):
    return net.load_checkpoint(_require(os.path.join(out, "checkpoint.npz"), "run train first"))


def cmd_extract(cfg, out=None):
    out = out or run_dir(cfg)
    model = _load_model(out)
    root = _require(corpus_dir(cfg), "run gen-corpus first")
    arrays = {}
    for split in ("train", "eval_clean", "eval_degraded"):
        utts = corpus.load_split(root, split)
        E = net.extract_embeddings(model, [u.waveform for u in utts])
        if not np.all(np.isfinite(E)):
            raise NumericError(f"non-finite embeddings for split {split}")
        arrays[f"{split}/ids"] = np.array([u.utt_id for u in utts])
        arrays[f"{split}/speakers"] = np.array([u.speaker_id for u in utts])
        arrays[f"{split}/vectors"] = E
    path = os.path.join(out, "embeddings.npz")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    print(f"wrote embeddings for {sum(len(v) for k, v in arrays.items() if k.endswith('ids'))} "
          f"utterances -> {path}")


def _load_embeddings(out):
    path = _require(os.path.join(out, "embeddings.npz"), "run extract first")
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


def score_condition(emb, trials, split, scorer):
    index = {uid: i for i, uid in enumerate(emb[f"{split}/ids"])}
    E = emb[f"{split}/vectors"]
    missing = [t for t in trials if t.enroll_id not in index or t.test_id not in index]
    if missing:
        raise ValueError(f"trial ids not found among {split} embeddings, e.g. {missing[0].enroll_id}")
    return scorer(E, [(index[t.enroll_id], index[t.test_id]) for t in trials])


def make_scorer(backend_name, emb):
    if backend_name == "cosine":
        return lambda E, pairs: np.array([be.cosine_score(E[i], E[j]) for i, j in pairs])
    plda = be.PLDABackend().fit(emb["train/vectors"], emb["train/speakers"])
    return plda.score_pairs


def cmd_score(cfg, out=None):
    out = out or run_dir(cfg)
    emb = _load_embeddings(out)
    root = _require(corpus_dir(cfg), "run gen-corpus first")
    scorer = make_scorer(cfg.backend, emb)
    for cond, (split, trial_file) in CONDITIONS.items():
        trials = corpus.read_trials(os.path.join(root, trial_file))
        scores = score_condition(emb, trials, split, scorer)
        if not np.all(np.isfinite(scores)):
            raise NumericError(f"non-finite {cfg.backend} scores for {cond}")
        path = os.path.join(out, f"scores.{cfg.backend}.{cond}.txt")
        be.write_scores(path, trials, scores)
        print(f"wrote {len(trials)} scores -> {path}")


METRIC_COLUMNS = ("system", "backend", "condition", "eer_pct", "min_dcf",
                  "ci_low", "ci_high", "n_target", "n_nontarget")


def _metrics_row(system, backend_name, condition, rep):
    return [system, backend_name, condition, f"{rep['eer_pct']:.4f}", f"{rep['min_dcf']:.4f}",
            f"{rep['ci_low']:.4f}", f"{rep['ci_high']:.4f}", str(rep["n_target"]),
            str(rep["n_nontarget"])]


def cmd_report(cfg):
    runs_root = os.path.join(cfg.out_dir, "runs")
    systems = sorted(d for d in os.listdir(runs_root)) if os.path.isdir(runs_root) else []
    systems = [s for s in systems if os.path.exists(os.path.join(runs_root, s, "checkpoint.npz"))]
    if not systems:
        raise FileNotFoundError(f"no trained systems under {runs_root}; run train first")
    root = _require(corpus_dir(cfg), "run gen-corpus first")
    rows = []
    for system in systems:
        out = os.path.join(runs_root, system)
        # scores are (re)derived when missing so a bare train -> report works
        if not os.path.exists(os.path.join(out, "embeddings.npz")):
            cmd_extract(cfg, out)
        for cond in CONDITIONS:
            if not os.path.exists(os.path.join(out, f"scores.{cfg.backend}.{cond}.txt")):
                cmd_score(cfg, out)
                break
        for cond, (_, trial_file) in CONDITIONS.items():
            trials = corpus.read_trials(os.path.join(root, trial_file))
            scores = be.read_scores(os.path.join(out, f"scores.{cfg.backend}.{cond}.txt"))
            s = metrics.ScoreSet([scores[(t.enroll_id, t.test_id)] for t in trials],
                                 [t.target for t in trials])
            rep = metrics.report(s, n_boot=cfg.n_boot, seed=cfg.seed)
            print(f"{system:10s} {cfg.backend:6s} {cond:10s} EER {rep['eer_pct']:6.2f}%  "
                  f"minDCF {rep['min_dcf']:.4f}  95% CI [{rep['ci_low']:.2f}, {rep['ci_high']:.2f}]")
            rows.append(_metrics_row(system, cfg.backend, cond, rep))
    path = os.path.join(cfg.out_dir, f"metrics.{cfg.backend}.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")
    print(f"wrote {path}")


def cmd_export_filters(cfg, init=False, n_fft=512):
    if cfg.front_end == "mel":
        raise UsageError("--front-end mel has no waveform filters to export")
    if init:
        enc = net.EncoderConfig()
        if cfg.front_end == "sinc":
            bank = fe.sinc_bank_init(enc.n_filters, enc.filter_len, enc.sample_rate)
        else:
            bank = fe.gabor_init(enc.n_filters, enc.filter_len, enc.sample_rate)
        out = os.path.join(cfg.out_dir, "filters")
        name = f"{cfg.front_end}_init.csv"
    else:
        out = run_dir(cfg)
        bank = _load_model(out).filterbank()
        name = "filters.csv"
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    fe.export_filter_responses(bank, path, n_fft)
    print(f"wrote {bank.n_filters} filter responses -> {path}")


def cmd_grad_check(cfg):
    results = gradcheck.run_all(cfg.seed)
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err <= gradcheck.TOLERANCE else "FAIL"
        print(f"{name:28s} {err:.3e}  {flag}")
        worst = max(worst, err)
    if worst > gradcheck.TOLERANCE:
        raise NumericError(f"max relative gradient error {worst:.3e} exceeds {gradcheck.TOLERANCE:g}")
    print(f"all {len(results)} checks within {gradcheck.TOLERANCE:g}")


# ----------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="flat JSON config file with a version key")
    p.add_argument("--out-dir", dest="out_dir", help="workspace directory (default: .)")
    p.add_argument("--seed", type=int)
    p.add_argument("--front-end", dest="front_end", choices=net.FRONT_ENDS)
    p.add_argument("--analytic", action="store_true", default=None,
                   help="use analytic (Hilbert-paired) filters")
    p.add_argument("--dropout", choices=net.DROPOUTS)
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--speakers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="rawspk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in [("gen-corpus", "synthesize the speaker corpus"),
                        ("train", "train a speaker-embedding network"),
                        ("extract", "extract embeddings for every corpus utterance"),
                        ("score", "score the matched and mismatched trial lists"),
                        ("report", "EER / min-DCF / bootstrap CI for all trained systems"),
                        ("export-filters", "write filter frequency responses as CSV"),
                        ("grad-check", "finite-difference check of every autodiff op")]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "export-filters":
            p.add_argument("--init", action="store_true",
                           help="export the initial filterbank instead of a trained one")
            p.add_argument("--n-fft", dest="n_fft", type=int, default=512)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-corpus":
            cmd_gen_corpus(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "extract":
            cmd_extract(cfg)
        elif args.command == "score":
            cmd_score(cfg)
        elif args.command == "report":
            cmd_report(cfg)
        elif args.command == "export-filters":
            cmd_export_filters(cfg, args.init, args.n_fft)
        elif args.command == "grad-check":
            cmd_grad_check(cfg)
    except UsageError as exc:
        print(f"rawspk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"rawspk: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"rawspk: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK

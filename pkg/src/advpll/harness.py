"""Experiment orchestration: configs, dataset files, training runs, ablations.

A run directory holds everything one configuration produces::

    config.txt      the resolved configuration (key=value)
    clean.csv       clean training split
    test.csv        clean held-out split
    partial.csv     corrupted training split
    report.txt      generation audit
    rival.txt       rival matrix (when one is used)
    metrics.csv     one row per epoch, deterministic
    timing.csv      wall-clock seconds per epoch
    checkpoint.txt  network, key network, prototypes and pseudo labels
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import atm, data, labelgen, nn, trainer, transition, verify
from .labelgen import ADVERSARY_AWARE, STANDARD
from .transition import FlipProfile, RivalMatrix

CORRECTIONS = ("transition", "identity")


class AmbiguityError(RuntimeError):
    def __init__(self, report):
        super().__init__(f"ambiguity condition violated (max rate {report.max_rate!r})")
        self.report = report


@dataclass
class ExperimentConfig:
    # data
    c: int = 10
    d: int = 16
    n_train: int = 2000
    n_test: int = 1000
    separation: float = 4.0
    variance: float = 1.0
    clean_path: str = ""
    test_path: str = ""
    mode: str = ADVERSARY_AWARE
    q: float = 0.3
    perturbation: float = 0.02
    rival_k: int = 5
    rival_w: float = 0.2
    rival_path: str = ""
    correction: str = "transition"
    # model and optimization
    widths: tuple = (64, 64)
    d_embed: int = 128
    alpha: float = 0.1
    beta: float = 0.01
    phi: float = 0.99
    lam: float = 0.5
    tau: float = 0.07
    ema: float = 0.999
    queue_capacity: int | None = None
    batch_size: int = 256
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 300
    warmup_epochs: int | None = None
    noise_std: float = 0.3
    mask_prob: float = 0.1
    qbar_init: str = "candidate"
    seed: int = 0
    out: str = "run"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.mode not in (STANDARD, ADVERSARY_AWARE):
            raise ValueError(f"mode must be {STANDARD!r} or {ADVERSARY_AWARE!r}")
        if self.correction not in CORRECTIONS:
            raise ValueError(f"correction must be one of {CORRECTIONS}")
        if self.c < 2 or self.d < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("c >= 2, d >= 1 and positive split sizes are required")
        if self.separation < 0 or self.variance <= 0:
            raise ValueError("separation must be >= 0 and variance > 0")
        if not 0.0 <= self.q <= 1.0 or self.perturbation < 0:
            raise ValueError("q must lie in [0, 1] and perturbation must be >= 0")
        self.train_config()

    def train_config(self) -> trainer.TrainConfig:
        names = trainer.config_fields()
        return trainer.TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def profile(self) -> FlipProfile:
        return FlipProfile(self.q, self.perturbation)

    def rival(self) -> RivalMatrix | None:
        if self.rival_path:
            return RivalMatrix(transition.load_matrix(self.rival_path))
        if self.mode == STANDARD:
            return None
        return transition.build_rival_matrix(self.c, self.rival_k, self.rival_w)

    def correction_matrix(self, c: int):
        rival = self.rival()
        if self.correction == "identity" or rival is None:
            return transition.identity_correction(c)
        return transition.adversary_aware_matrix(rival)


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default):
    """Parse a config value; the field's default decides the type."""
    if text == "auto":
        return None
    if isinstance(default, tuple):
        return tuple(int(t) for t in text.split(",") if t.strip())
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int) or default is None:
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def config_to_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name}={_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def parse_overrides(pairs: dict) -> dict:
    defaults = ExperimentConfig.__dataclass_fields__
    out = {}
    for key, text in pairs.items():
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        try:
            out[key] = _parse(str(text).strip(), defaults[key].default)
        except ValueError:
            raise ValueError(f"bad value for {key}: {text!r}") from None
    return out


def config_from_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = {}
    for lineno, ln in enumerate(text.splitlines(), start=1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        key, sep, value = ln.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        pairs[key.strip()] = value
    return replace(base or ExperimentConfig(), **parse_overrides(pairs))


def load_config(path) -> ExperimentConfig:
    return config_from_text(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(config_to_text(cfg))


# --- generate ----------------------------------------------------------------

def build_datasets(cfg: ExperimentConfig):
    """Returns ``(partial, test, mixture_or_None)`` without touching disk."""
    if cfg.clean_path:
        clean = data.load_csv(cfg.clean_path, cfg.c)
        test = data.load_csv(cfg.test_path, cfg.c) if cfg.test_path else clean
        spec = None
    else:
        spec = data.default_mixture(cfg.c, cfg.d, cfg.separation, cfg.variance, cfg.seed)
        clean, _ = data.sample_mixture(spec, cfg.n_train)
        test, _ = data.sample_mixture(spec, cfg.n_test, offset=cfg.n_train)
    profile = cfg.profile()
    rival = cfg.rival()
    amb = labelgen.check_ambiguity(profile, rival)
    if not amb.ok:
        raise AmbiguityError(amb)
    if cfg.mode == STANDARD:
        partial = labelgen.generate_standard(clean, profile, cfg.seed)
    else:
        partial = labelgen.generate_adversary_aware(clean, rival, profile, cfg.seed)
    return partial, test, spec


def cmd_generate(cfg: ExperimentConfig) -> labelgen.GenerationReport:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    partial, test, spec = build_datasets(cfg)
    data.save_csv(partial.clean, out / "clean.csv")
    data.save_csv(test, out / "test.csv")
    labelgen.save_pll_csv(partial, out / "partial.csv")
    if spec is not None:
        data.save_mixture_spec(spec, out / "mixture.txt")
    rival = cfg.rival()
    if rival is not None:
        transition.save_matrix(out / "rival.txt", rival.entries)
    report = labelgen.audit_generation(partial)
    (out / "report.txt").write_text("\n".join(report.lines()) + "\n")
    save_config(cfg, out / "config.txt")
    return report


# --- train / eval --------------------------------------------------------------

def load_run_data(cfg: ExperimentConfig):
    out = Path(cfg.out)
    if not (out / "partial.csv").exists():
        raise FileNotFoundError(f"{out / 'partial.csv'} not found; run generate first")
    partial = labelgen.load_pll_csv(out / "partial.csv", cfg.c)
    test_file = out / "test.csv"
    test = data.load_csv(test_file, partial.n_classes) if test_file.exists() else partial.clean
    return partial, test


def architecture(cfg: ExperimentConfig, d_in: int, c: int) -> nn.Architecture:
    return nn.Architecture(d_in, c, cfg.widths, cfg.d_embed)


def save_checkpoint(path, state: trainer.TrainState):
    extra = {f"key.{k}": v for k, v in state.key.params.items()}
    extra["prototypes"] = state.bank.vectors
    extra["pseudo_labels"] = state.store.targets
    nn.save_network(path, state.net, extra)


def load_checkpoint(path, arch: nn.Architecture):
    """Returns ``(network, prototype_bank, pseudo_labels)``."""
    net, extra = nn.load_network(path, arch)
    if "prototypes" not in extra:
        raise ValueError("checkpoint lacks prototypes")
    protos = extra["prototypes"]
    if protos.shape != (arch.n_classes, arch.d_embed):
        raise ValueError(f"prototypes have shape {protos.shape}, expected {(arch.n_classes, arch.d_embed)}")
    return net, atm.PrototypeBank(protos), extra.get("pseudo_labels")


def _csv_append(path, row):
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(row)


def cmd_train(cfg: ExperimentConfig):
    """Train on the run directory's data; returns ``(state, rows)``.

    Metrics are flushed after every epoch. On divergence the partial
    metrics stay on disk and ``TrainingDiverged`` propagates.
    """
    out = Path(cfg.out)
    partial, test = load_run_data(cfg)
    M = cfg.correction_matrix(partial.n_classes)
    tcfg = cfg.train_config()
    metrics, timing = out / "metrics.csv", out / "timing.csv"
    metrics.write_text(",".join(trainer.MetricsRow.HEADER) + "\n")
    timing.write_text("epoch,seconds\n")
    save_config(cfg, out / "config.txt")

    def flush(row, state):
        _csv_append(metrics, row.csv_fields())
        _csv_append(timing, [row.epoch, f"{row.seconds:.6f}"])

    state, rows = trainer.fit(partial, M, tcfg, test, on_epoch=flush)
    save_checkpoint(out / "checkpoint.txt", state)
    return state, rows


@dataclass
class EvalReport:
    accuracy: float
    prototype_accuracy: float
    n: int

    def lines(self):
        return [f"accuracy={self.accuracy!r}", f"prototype_accuracy={self.prototype_accuracy!r}", f"n={self.n}"]


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, dataset=None) -> EvalReport:
    """Top-1 accuracy on a clean or partial-label CSV, plus prototype accuracy
    when candidate sets are available (otherwise the full label set is used)."""
    out = Path(cfg.out)
    checkpoint = Path(checkpoint or out / "checkpoint.txt")
    dataset = Path(dataset or out / "test.csv")
    header = dataset.read_text().split("\n", 1)[0]
    if "candidate_mask_hex" in header:
        pds = labelgen.load_pll_csv(dataset)
        clean, cand = pds.clean, pds.candidates
    else:
        clean = data.load_csv(dataset)
        cand = None
    arch = architecture(cfg, clean.d, cfg.c)
    net, bank, _ = load_checkpoint(checkpoint, arch)
    if clean.n_classes > arch.n_classes:
        raise ValueError("dataset has more classes than the checkpoint")
    clean = labelgen.CleanDataset(clean.features, clean.labels, arch.n_classes)
    if cand is None:
        cand = np.ones((clean.n, arch.n_classes), dtype=bool)
    elif cand.shape[1] < arch.n_classes:
        cand = np.pad(cand, ((0, 0), (0, arch.n_classes - cand.shape[1])))
    u = nn.forward(net, clean.features).embedding
    return EvalReport(trainer.accuracy(net, clean), atm.prototype_accuracy(u, bank, cand, clean.labels), clean.n)


# --- verify / ablate ---------------------------------------------------------

def cmd_verify(level: str = "fast", seed: int = 0, out=None, settings=None) -> list:
    reports = verify.run_suite(level, seed, settings)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for rep in reports:
            rep.write_table(out / f"{rep.name}.csv")
        (out / "summary.txt").write_text("\n".join(ln for r in reports for ln in r.lines()) + "\n")
    return reports


@dataclass
class AblationResult:
    seeds: tuple
    with_t: list
    without_t: list

    @property
    def median_with(self) -> float:
        return statistics.median(self.with_t)

    @property
    def median_without(self) -> float:
        return statistics.median(self.without_t)

    def lines(self):
        out = ["seed,with_T,without_T"]
        out += [f"{s},{a!r},{b!r}" for s, a, b in zip(self.seeds, self.with_t, self.without_t)]
        out.append(f"median,{self.median_with!r},{self.median_without!r}")
        return out


def cmd_ablate(cfg: ExperimentConfig, seeds=(0, 1, 2, 3, 4)) -> AblationResult:
    """Paired with-T / without-T runs: both arms of a seed share one dataset."""
    with_t, without_t = [], []
    for s in seeds:
        run = replace(cfg, seed=s)
        partial, test, _ = build_datasets(run)
        tcfg = run.train_config()
        accs = []
        for corr in CORRECTIONS:
            M = replace(run, correction=corr).correction_matrix(partial.n_classes)
            _, rows = trainer.fit(partial, M, tcfg, test)
            accs.append(rows[-1].test_acc)
        with_t.append(accs[0])
        without_t.append(accs[1])
    result = AblationResult(tuple(seeds), with_t, without_t)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(result.lines()) + "\n")
    return result

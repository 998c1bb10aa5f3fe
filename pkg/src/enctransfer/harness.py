"""Experiment harness: config files, staged runs, caching, reports.

A run is described by an INI config (see ExperimentConfig). Stages:

  1. load or synthesize the dataset (seeded, stratified subsets);
  2. train every roster model, cached by a content hash of everything
     that influences the weights;
  3. run the attack suite for each designated source model, cached by a
     content hash of (model, attack config, image slice);
  4. evaluate every target on every adversarial batch;
  5. emit the transfer report as CSV, formatted text table and JSON,
     plus a manifest with config hash, artifact checksums and timings.

Re-running with the same config reuses cached checkpoints and AE
directories and reproduces byte-identical reports. The `workers`
setting only controls how attack image slices are partitioned; because
every image draws from its own RNG stream, reports are identical for
any worker count.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import attacks, crypto, data, metrics, models

EPSILON_DEFAULT = 8.0 / 255.0


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass(frozen=True)
class ModelEntry:
    """One roster model: a name, an architecture, optional encryption."""

    name: str
    architecture: str
    transform: str | None = None   # SHF | NP | FFX
    block_size: int = 4
    key_seed: int = 0
    train_seed: int = 0
    lr: float | None = None        # None -> the run-wide training lr

    def key(self) -> crypto.EncryptionKey | None:
        if self.transform is None:
            return None
        return crypto.EncryptionKey(self.key_seed, self.transform, self.block_size)


@dataclass
class ExperimentConfig:
    # dataset
    dataset_path: str | None = None
    n_train: int = 5000
    n_test: int = 1000
    n_attack: int = 256
    # training
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # attacks
    epsilon: float = EPSILON_DEFAULT
    n_iter: int = 100
    square_queries: int = 1000
    attack_kinds: tuple = attacks.ATTACK_KINDS
    # run
    master_seed: int = 0
    output_dir: str = "runs/experiment"
    workers: int = 1
    roster: tuple = ()   # tuple[ModelEntry]
    sources: tuple = ()  # names of roster models that generate AEs

    def __post_init__(self):
        names = [m.name for m in self.roster]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate model names in roster")
        for s in self.sources:
            if s not in names:
                raise ConfigError(f"source {s!r} not in roster")
        for m in self.roster:
            if m.transform is not None and m.transform not in crypto.TRANSFORMS:
                raise ConfigError(f"model {m.name!r}: unknown transform {m.transform!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    # -- INI round trip ------------------------------------------------------

    @classmethod
    def from_ini(cls, path: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ConfigError(f"config file not found: {path}")
        kw = {}

        def take(section, key, conv, dest=None):
            if cp.has_option(section, key):
                kw[dest or key] = conv(cp.get(section, key))

        take("dataset", "path", lambda s: s or None, "dataset_path")
        take("dataset", "n_train", int)
        take("dataset", "n_test", int)
        take("dataset", "n_attack", int)
        take("training", "epochs", int)
        take("training", "batch_size", int)
        take("training", "lr", float)
        take("training", "momentum", float)
        take("training", "weight_decay", float)
        take("attacks", "epsilon", float)
        take("attacks", "n_iter", int)
        take("attacks", "square_queries", int)
        take("attacks", "kinds", lambda s: tuple(k.strip() for k in s.split(",")), "attack_kinds")
        take("run", "master_seed", int)
        take("run", "output_dir", str)
        take("run", "workers", int)
        roster = []
        if cp.has_section("models"):
            for name, value in cp.items("models"):
                roster.append(_parse_model_entry(name, value))
        kw["roster"] = tuple(roster)
        if cp.has_option("run", "sources"):
            kw["sources"] = tuple(s.strip() for s in cp.get("run", "sources").split(","))
        return cls(**kw)

    def describe(self) -> dict:
        """Every field, defaults included, as printed into the manifest."""
        d = {k: v for k, v in self.__dict__.items() if k != "roster"}
        d["attack_kinds"] = list(self.attack_kinds)
        d["sources"] = list(self.sources)
        d["roster"] = [m.__dict__ for m in self.roster]
        return d

    def config_hash(self) -> str:
        return _sha256_json(self.describe())


def _parse_model_entry(name: str, value: str) -> ModelEntry:
    """`name = arch[, transform, M[, key_seed[, train_seed[, lr]]]]`.

    Empty fields keep their defaults, so a plain model can still set a
    trailing field: `vit = vit_tiny, , , , , 0.003`.
    """
    parts = [p.strip() for p in value.split(",")]
    parts += [""] * (6 - len(parts))
    if parts[0] not in models.ARCHITECTURES:
        raise ConfigError(f"model {name!r}: unknown architecture {parts[0]!r}")
    if parts[1] and not parts[2]:
        raise ConfigError(f"model {name!r}: encrypted entries need 'arch, transform, M'")
    return ModelEntry(name, parts[0],
                      transform=parts[1] or None,
                      block_size=int(parts[2]) if parts[2] else 4,
                      key_seed=int(parts[3]) if parts[3] else 0,
                      train_seed=int(parts[4]) if parts[4] else 0,
                      lr=float(parts[5]) if parts[5] else None)


def _sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    stages: dict = field(default_factory=dict)      # name -> {status, seconds}
    checkpoints: dict = field(default_factory=dict)  # model name -> sha256
    ae_batches: dict = field(default_factory=dict)   # "src/kind" -> sha256
    reports: dict = field(default_factory=dict)      # filename -> sha256
    trend_checks: list = field(default_factory=list)

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(self.__dict__, f, indent=2, sort_keys=True)


# -- staged run ---------------------------------------------------------------

def _train_one(cfg: ExperimentConfig, entry: ModelEntry, train, test, path: str,
               log=None):
    content = {
        "entry": entry.__dict__, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "lr": cfg.lr, "momentum": cfg.momentum, "weight_decay": cfg.weight_decay,
        "n_train": cfg.n_train, "master_seed": cfg.master_seed,
        "dataset": cfg.dataset_path or "synthetic",
    }
    ckpt = os.path.join(path, f"{entry.name}-{_sha256_json(content)[:16]}.ckpt")
    if os.path.exists(ckpt):
        if log:
            log(f"model {entry.name}: cached ({os.path.basename(ckpt)})")
        return models.Classifier.load(ckpt), ckpt
    tcfg = models.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                              lr=entry.lr if entry.lr is not None else cfg.lr,
                              momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                              seed=cfg.master_seed + entry.train_seed)
    model = models.train(models.ModelSpec(entry.architecture), train, tcfg,
                         key=entry.key(), test_data=test, log=log)
    model.save(ckpt)
    if log:
        log(f"model {entry.name}: trained, metrics {model.metrics}")
    return model, ckpt


def _attack_in_chunks(model, images, labels, cfg_attack, workers: int, log=None):
    """Partition the image slice across `workers` chunks.

    Per-image RNG streams make the result identical for any partition;
    chunks are processed sequentially on one core.
    """
    n = len(images)
    chunk = -(-n // workers)
    parts = []
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        runner = attacks.run_attack_suite(
            model, images[lo:hi], labels[lo:hi],
            {cfg_attack.attack_kind: cfg_attack}, indices=np.arange(lo, hi), log=log)
        if runner.errors:
            raise models.GradientUnavailableError(runner.errors[cfg_attack.attack_kind])
        parts.append(runner.batches[cfg_attack.attack_kind])
    first = parts[0]
    return attacks.AdversarialBatch(
        first.attack_kind,
        np.concatenate([p.originals for p in parts]),
        np.concatenate([p.adversarials for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.success for p in parts]),
        np.concatenate([p.final_loss for p in parts]),
        first.epsilon,
        {k: sum(p.audit.get(k, 0) for p in parts) for p in parts for k in p.audit},
    )


def run_experiment(cfg: ExperimentConfig, log=None):
    from . import __version__
    os.makedirs(cfg.output_dir, exist_ok=True)
    manifest = RunManifest(cfg.config_hash(), __version__)

    def stage(name):
        t0 = time.time()

        def done(status="ok"):
            manifest.stages[name] = {"status": status,
                                     "seconds": round(time.time() - t0, 2)}
        return done

    # stage 1: data
    done = stage("data")
    train, test = data.load_cifar10(cfg.dataset_path, cfg.n_train, cfg.n_test,
                                    seed=cfg.master_seed)
    n_attack = min(cfg.n_attack, len(test))
    attack_images = test.images[:n_attack].astype(np.float32) / 255.0
    attack_labels = test.labels[:n_attack]
    done()

    # stage 2: models
    done = stage("train")
    ckpt_dir = os.path.join(cfg.output_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    zoo = {}
    for entry in cfg.roster:
        model, ckpt = _train_one(cfg, entry, train, test, ckpt_dir, log)
        zoo[entry.name] = model
        manifest.checkpoints[entry.name] = _sha256_file(ckpt)
    done()

    # stage 3: attacks
    done = stage("attack")
    batches = {}  # (source, kind) -> AdversarialBatch
    slice_hash = _sha256_json([hashlib.sha256(attack_images.tobytes()).hexdigest(),
                               attack_labels.tolist()])
    for source in cfg.sources:
        configs = attacks.default_configs(cfg.master_seed, cfg.epsilon, cfg.n_iter,
                                          cfg.square_queries)
        for kind in cfg.attack_kinds:
            acfg = configs[kind]
            cache_key = _sha256_json([manifest.checkpoints[source], slice_hash,
                                      acfg.__dict__])[:16]
            ae_dir = os.path.join(cfg.output_dir, "aes", source, f"{kind}-{cache_key}")
            if os.path.isdir(ae_dir):
                batches[(source, kind)] = attacks.load_batch(ae_dir)
                if log:
                    log(f"attack {source}/{kind}: cached")
            else:
                try:
                    batch = _attack_in_chunks(zoo[source], attack_images, attack_labels,
                                              acfg, cfg.workers, log)
                except models.GradientUnavailableError as e:
                    manifest.stages[f"attack:{source}/{kind}"] = {
                        "status": f"skipped: {e}", "seconds": 0}
                    continue
                attacks.save_batch(batch, ae_dir, cfg=acfg,
                                   model_checksum=manifest.checkpoints[source])
                batches[(source, kind)] = batch
            manifest.ae_batches[f"{source}/{kind}"] = _sha256_file(
                os.path.join(ae_dir, "adversarials.npy"))
    done()

    # stage 4: evaluation
    done = stage("evaluate")
    entries = [((src, kind, b.originals, b.adversarials, b.labels,
                 zoo[src].logits(b.originals).argmax(axis=1)))
               for (src, kind), b in sorted(batches.items())]
    report = metrics.transfer_matrix(entries, zoo,
                                     lambda m, imgs: m.logits(imgs).argmax(axis=1))
    done()

    # stage 5: reports
    done = stage("report")
    meta = {m.name: m for m in cfg.roster}
    for fmt in ("csv", "table", "json"):
        path = emit_report(report, meta, cfg.output_dir, fmt)
        manifest.reports[os.path.basename(path)] = _sha256_file(path)
    done()

    manifest.save(os.path.join(cfg.output_dir, "manifest.json"))
    return manifest, report


# -- report emission ----------------------------------------------------------

CSV_COLUMNS = ("source", "target", "transform", "block_size", "attack",
               "N", "N_c", "acc", "asr")


def _sorted_cells(report: metrics.TransferReport):
    return [report.cells[k] for k in sorted(report.cells)]


def emit_report(report: metrics.TransferReport, roster_meta: dict,
                output_dir: str, fmt: str) -> str:
    """Write report.{csv,txt,json}; returns the path written."""
    if fmt == "csv":
        path = os.path.join(output_dir, "report.csv")
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for c in _sorted_cells(report):
            m = roster_meta.get(c.target)
            transform = (m.transform or "plain") if m else "plain"
            block = m.block_size if (m and m.transform) else ""
            buf.write(f"{c.source},{c.target},{transform},{block},{c.attack},"
                      f"{c.n},{c.n_c},{metrics.round2(c.acc)},{metrics.round2(c.asr)}\n")
        with open(path, "w", newline="") as f:
            f.write(buf.getvalue())
    elif fmt == "json":
        path = os.path.join(output_dir, "report.json")
        cells = [c.__dict__ for c in _sorted_cells(report)]
        with open(path, "w") as f:
            json.dump({"cells": cells}, f, indent=2, sort_keys=True)
    elif fmt == "table":
        path = os.path.join(output_dir, "report.txt")
        with open(path, "w") as f:
            f.write(format_table(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def format_table(report: metrics.TransferReport) -> str:
    """Text tables in the paper's layout: one Acc and one ASR grid per
    source, targets as rows, attacks as columns, '—' for absent cells."""
    out = []
    atk = report.attacks
    for source in report.sources:
        for title, get in (("Acc", lambda c: metrics.round2(c.acc)),
                           ("ASR", lambda c: metrics.round2(c.asr))):
            out.append(f"{title} — source: {source}")
            header = ["target".ljust(18)] + [a.rjust(9) for a in atk]
            out.append("  ".join(header))
            for target in report.targets:
                row = [target.ljust(18)]
                for a in atk:
                    cell = report.get(source, target, a)
                    row.append(("—" if cell is None else get(cell)).rjust(9))
                out.append("  ".join(row))
            out.append("")
    return "\n".join(out) + "\n"


# -- reproduce presets ---------------------------------------------------------

EXPERIMENTS = ("tables-2-5", "tables-6-7", "tables-8-9")

# encrypted targets share the source architecture, mirroring the paper's
# "encrypted ResNet18" targets
_ENC_ARCH = "cnn_small"


def preset_config(experiment: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Roster + sources for one of the three scripted experiments."""
    if base is None:
        base = ExperimentConfig()
    kw = {k: v for k, v in base.__dict__.items() if k not in ("roster", "sources")}

    if experiment == "tables-2-5":
        # the transformer needs a gentler lr than the CNN recipe
        roster = [ModelEntry("cnn_small", "cnn_small"),
                  ModelEntry("cnn_deep", "cnn_deep"),
                  ModelEntry("vit_tiny", "vit_tiny", lr=0.003)]
        sources = ("cnn_small",)
    elif experiment == "tables-6-7":
        roster = [ModelEntry("plain", _ENC_ARCH)]
        for transform in crypto.TRANSFORMS:
            for m in (4, 8, 16):
                roster.append(ModelEntry(f"{transform.lower()}{m}", _ENC_ARCH,
                                         transform, m, key_seed=1))
        sources = ("plain",)
    elif experiment == "tables-8-9":
        roster = [ModelEntry("shf4", _ENC_ARCH, "SHF", 4, key_seed=1),
                  ModelEntry("shf4_other_key", _ENC_ARCH, "SHF", 4, key_seed=2),
                  ModelEntry("shf8_other_key", _ENC_ARCH, "SHF", 8, key_seed=3),
                  ModelEntry("np4_other_key", _ENC_ARCH, "NP", 4, key_seed=4),
                  ModelEntry("ffx4_other_key", _ENC_ARCH, "FFX", 4, key_seed=5)]
        sources = ("shf4",)
    else:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    kw["roster"] = tuple(roster)
    kw["sources"] = sources
    if kw["output_dir"] == ExperimentConfig.output_dir:
        kw["output_dir"] = os.path.join("runs", experiment)
    return ExperimentConfig(**kw)


def check_trends(experiment: str, report: metrics.TransferReport) -> list:
    """Encoded qualitative trend assertions; returns [(name, ok, detail)]."""
    checks = []

    def asr_of(source, target, attack="APGD_CE"):
        cell = report.get(source, target, attack)
        return None if cell is None else cell.asr

    if experiment == "tables-2-5":
        self_asr = asr_of("cnn_small", "cnn_small")
        checks.append(("self-attack ASR >= 95",
                       self_asr is not None and self_asr >= 95,
                       f"ASR(cnn_small->cnn_small)={metrics.round2(self_asr)}"))
        vit, deep = asr_of("cnn_small", "vit_tiny"), asr_of("cnn_small", "cnn_deep")
        checks.append(("architecture gap: ASR(->vit_tiny) < ASR(->cnn_deep)",
                       None not in (vit, deep) and vit < deep,
                       f"vit={metrics.round2(vit)} deep={metrics.round2(deep)}"))
    elif experiment == "tables-6-7":
        shf4, ffx16 = asr_of("plain", "shf4"), asr_of("plain", "ffx16")
        checks.append(("FFX16 cuts transfer: ASR(->ffx16) <= ASR(->shf4) - 10",
                       None not in (shf4, ffx16) and ffx16 <= shf4 - 10,
                       f"shf4={metrics.round2(shf4)} ffx16={metrics.round2(ffx16)}"))
        for transform in crypto.TRANSFORMS:
            seq = [asr_of("plain", f"{transform.lower()}{m}") for m in (4, 8, 16)]
            ok = None not in seq and all(b <= a + 5 for a, b in zip(seq, seq[1:]))
            checks.append((f"{transform}: ASR non-increasing in M (5-pt margin)",
                           ok, " -> ".join(metrics.round2(v) for v in seq)))
    elif experiment == "tables-8-9":
        same, other = asr_of("shf4", "shf4"), asr_of("shf4", "shf4_other_key")
        checks.append(("key change drops ASR by >= 50",
                       None not in (same, other) and same - other >= 50,
                       f"same={metrics.round2(same)} other={metrics.round2(other)}"))
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")
    return checks


def reproduce(experiment: str, base: ExperimentConfig | None = None, log=None):
    """Run a preset experiment and its trend checks.

    Returns (manifest, report, checks); any failed check means the
    qualitative claims were not reproduced at this scale.
    """
    cfg = preset_config(experiment, base)
    manifest, report = run_experiment(cfg, log=log)
    checks = check_trends(experiment, report)
    manifest.trend_checks = [{"name": n, "ok": ok, "detail": d} for n, ok, d in checks]
    manifest.save(os.path.join(cfg.output_dir, "manifest.json"))
    if log:
        for name, ok, detail in checks:
            log(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return manifest, report, checks

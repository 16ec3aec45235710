"""``voxelnet`` command line: synth, pretrain, featurize, train, eval, export-slice.

All stages read one flat ``key=value`` config file (``--config``); command-line
flags override it.  Every random stream is derived from ``seed`` and the stage
name, so a rerun with the same config reproduces every output byte for byte.

Work directory layout::

    <workdir>/data/manifest.csv, <workdir>/data/*.vxv
    <workdir>/<mode>/ae.vxae, patches.vxpc, ae_history.json, features.vxfv
    <workdir>/<mode>/<task>/classifier.vxmc, history.json, metrics.json
"""

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autoencoder as ae_mod
from . import classifier as mlp
from . import convnet, dataio
from .exceptions import ParameterError, VoxelnetError
from .tensor_core import derive_seed

MODES = ("3d", "2d")
# first-named class becomes label 0
TASKS = {
    "3way": (dataio.AD, dataio.MCI, dataio.HC),
    "ad-hc": (dataio.AD, dataio.HC),
    "ad-mci": (dataio.AD, dataio.MCI),
    "hc-mci": (dataio.HC, dataio.MCI),
}
TASK_TITLES = {"3way": "3-way", "ad-hc": "AD vs. HC", "ad-mci": "AD vs. MCI",
               "hc-mci": "HC vs. MCI"}


def _shape(text):
    return tuple(int(a) for a in str(text).lower().split("x"))


def _floats(text):
    return tuple(float(a) for a in str(text).split(","))


def _bool(text):
    value = str(text).strip().lower()
    if value not in ("true", "false"):
        raise ParameterError(f"expected true/false, got {text!r}")
    return value == "true"


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if all(isinstance(v, int) for v in value):
            return "x".join(str(v) for v in value)
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclasses.dataclass
class RunConfig:
    workdir: str = "run"
    manifest: str = ""
    mode: str = "3d"
    task: str = "3way"
    seed: int = 0
    normalize: bool = True

    synth_shape: tuple = (20, 24, 20)
    synth_count_per_class: int = 100
    synth_noise_sd: float = 0.6
    synth_jitter: int = 0
    split_fractions: tuple = (0.764, 0.135, 0.101)
    split_counts: str = ""

    patch_size_3d: tuple = (5, 5, 5)
    patch_size_2d: tuple = (11, 11)
    pretrain_scans: int = 100
    patches_per_scan: int = 1000
    patch_split: tuple = (0.8, 0.1, 0.1)
    ae_hidden: int = 150
    ae_sparsity: float = 0.05
    ae_beta: float = 3.0
    ae_lambda: float = 3e-3
    ae_batch_size: int = 100
    ae_learning_rate: float = 0.01
    ae_epochs: int = 50
    ae_init_scale: float = 1.0

    pool_3d: tuple = (5, 5, 5)
    pool_2d: tuple = (10, 10)

    mlp_hidden: int = 800
    mlp_learning_rate: float = 0.01
    mlp_momentum: float = 0.9
    mlp_batch_size: int = 32
    mlp_max_epochs: int = 200
    mlp_eval_every: int = 1

    def validate(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ParameterError(f"task must be one of {tuple(TASKS)}, got {self.task!r}")
        return self

    @property
    def root(self):
        return Path(self.workdir)

    @property
    def manifest_path(self):
        return Path(self.manifest) if self.manifest else self.root / "data" / "manifest.csv"

    @property
    def mode_dir(self):
        return self.root / self.mode

    @property
    def task_dir(self):
        return self.mode_dir / self.task

    @property
    def patch_size(self):
        return self.patch_size_3d if self.mode == "3d" else self.patch_size_2d

    @property
    def pool_window(self):
        return self.pool_3d if self.mode == "3d" else self.pool_2d


_PARSERS = {}
for _f in dataclasses.fields(RunConfig):
    default = _f.default
    if isinstance(default, bool):
        _PARSERS[_f.name] = _bool
    elif isinstance(default, int):
        _PARSERS[_f.name] = int
    elif isinstance(default, float):
        _PARSERS[_f.name] = float
    elif isinstance(default, tuple):
        _PARSERS[_f.name] = _shape if isinstance(default[0], int) else _floats
    else:
        _PARSERS[_f.name] = str


def parse_config(text, base=None):
    """Parse ``key=value`` lines (``#`` comments allowed) over ``base`` defaults."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParameterError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ParameterError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ParameterError(f"config line {lineno}: bad value for {key}: {exc}") from None
    return dataclasses.replace(base or RunConfig(), **values)


def dump_config(cfg):
    return "".join(f"{f.name}={_fmt(getattr(cfg, f.name))}\n"
                   for f in dataclasses.fields(RunConfig))


def _threads():
    try:
        return max(1, int(os.environ.get("VOXELNET_THREADS", "1")))
    except ValueError:
        raise ParameterError("VOXELNET_THREADS must be an integer") from None


def _load_scan(cfg, entry):
    path = Path(entry.path)
    if not path.is_absolute():
        path = cfg.manifest_path.parent / path
    vol = dataio.load_volume(path)
    return dataio.normalize_volume(vol) if cfg.normalize else vol


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(cfg, out=None):
    data = cfg.root / "data"
    data.mkdir(parents=True, exist_ok=True)
    synth = dataio.SynthConfig(shape=cfg.synth_shape, noise_sd=cfg.synth_noise_sd,
                               jitter=cfg.synth_jitter,
                               count_per_class=cfg.synth_count_per_class,
                               seed=derive_seed(cfg.seed, "synth"))
    records = dataio.synth_generate(synth)
    counts = ([int(c) for c in cfg.split_counts.split(",")]
              if cfg.split_counts else None)
    splits = dataio.split_manifest(len(records), counts=counts,
                                   fractions=cfg.split_fractions,
                                   seed=derive_seed(cfg.seed, "split"))
    entries = []
    for rec, split in zip(records, splits):
        name = f"{rec.subject_id}.vxv"
        dataio.save_volume(rec.volume, data / name)
        entries.append(dataio.ManifestEntry(name, rec.label, rec.subject_id, split))
    dataio.write_manifest(entries, cfg.manifest_path)
    for label in sorted(dataio.CLASS_NAMES):
        n = sum(e.label == label for e in entries)
        print(f"{dataio.CLASS_NAMES[label]}: {n}", file=out)
    return entries


def cmd_pretrain(cfg, out=None):
    cfg.validate()
    entries = [e for e in dataio.read_manifest(cfg.manifest_path) if e.split == "train"]
    scans = [_load_scan(cfg, e) for e in entries[: cfg.pretrain_scans]]
    seed = derive_seed(cfg.seed, f"patches-{cfg.mode}")
    extract = dataio.extract_patches_3d if cfg.mode == "3d" else dataio.extract_patches_2d
    P = extract(scans, cfg.patches_per_scan, cfg.patch_size, seed=seed)
    if len(P) == 0:
        raise ParameterError("no patches extracted; check pretrain_scans and patches_per_scan")
    parts = dataio.split_manifest(len(P), fractions=cfg.patch_split,
                                  seed=derive_seed(cfg.seed, f"patch-split-{cfg.mode}"))
    parts = np.array(parts)
    P_train, P_val, P_test = (P[parts == s] for s in dataio.SPLITS)

    est = ae_mod.SparseAutoencoder(
        n_hidden=cfg.ae_hidden, sparsity_target=cfg.ae_sparsity, beta=cfg.ae_beta,
        weight_decay=cfg.ae_lambda, batch_size=cfg.ae_batch_size,
        learning_rate=cfg.ae_learning_rate, epochs=cfg.ae_epochs,
        seed=derive_seed(cfg.seed, f"ae-{cfg.mode}"), init_scale=cfg.ae_init_scale,
    )
    est.fit(P_train, X_val=P_val if len(P_val) else None)
    cfg.mode_dir.mkdir(parents=True, exist_ok=True)
    dataio.save_patches(P, cfg.mode_dir / "patches.vxpc")
    ae_mod.save_params(est.params_, cfg.mode_dir / "ae.vxae")
    summary = {"n_inputs": est.params_.n_inputs, "n_hidden": est.params_.n_hidden,
               "train_reconstruction": ae_mod.reconstruction_cost(est.params_, P_train),
               "history": est.history_}
    for name, part in (("val_reconstruction", P_val), ("test_reconstruction", P_test)):
        if len(part):
            summary[name] = ae_mod.reconstruction_cost(est.params_, part)
    _write_json(cfg.mode_dir / "ae_history.json", summary)
    print(f"patches: {len(P_train)} train / {len(P_val)} val / {len(P_test)} test", file=out)
    print(f"train reconstruction cost: {summary['train_reconstruction']:.6f}", file=out)
    if "val_reconstruction" in summary:
        print(f"val reconstruction cost: {summary['val_reconstruction']:.6f}", file=out)
    return est.params_


def load_bank(cfg, input_shape):
    params = ae_mod.load_params(cfg.mode_dir / "ae.vxae")
    bases = ae_mod.extract_bases(params, cfg.patch_size)
    return convnet.ConvFeatureBank.from_bases(bases, cfg.mode, cfg.pool_window, input_shape)


def cmd_featurize(cfg, out=None):
    cfg.validate()
    entries = dataio.read_manifest(cfg.manifest_path)
    first = _load_scan(cfg, entries[0])
    bank = load_bank(cfg, first.shape)
    workers = _threads()

    def run(entry):
        return convnet.featurize(_load_scan(cfg, entry), bank)

    if workers > 1:
        # pool.map keeps manifest order; one BLAS thread per worker
        with threadpool_limits(1), ThreadPoolExecutor(workers) as pool:
            vectors = list(pool.map(run, entries))
    else:
        vectors = [run(e) for e in entries]
    convnet.write_feature_cache(cfg.mode_dir / "features.vxfv", vectors)
    print(f"{len(vectors)} feature vectors of length {bank.n_features}", file=out)
    return vectors


def task_data(cfg, split):
    """Features and task labels for one split; binary tasks filter and relabel."""
    entries = dataio.read_manifest(cfg.manifest_path)
    vectors = convnet.read_feature_cache(cfg.mode_dir / "features.vxfv")
    if len(vectors) != len(entries):
        raise ParameterError(
            f"feature cache has {len(vectors)} records for {len(entries)} manifest entries"
        )
    classes = TASKS[cfg.task]
    rows = [i for i, e in enumerate(entries) if e.split == split and e.label in classes]
    if not rows:
        raise ParameterError(f"no {split} examples for task {cfg.task}")
    X = np.stack([vectors[i] for i in rows]).astype(np.float64)
    y = np.array([classes.index(entries[i].label) for i in rows])
    return X, y


def cmd_train(cfg, out=None):
    cfg.validate()
    X, y = task_data(cfg, "train")
    Xv, yv = task_data(cfg, "val")
    n_classes = len(TASKS[cfg.task])
    net = mlp.init_network(X.shape[1], cfg.mlp_hidden, n_classes,
                           derive_seed(cfg.seed, f"mlp-init-{cfg.mode}-{cfg.task}"))
    fit = mlp.FitConfig(cfg.mlp_learning_rate, cfg.mlp_momentum, cfg.mlp_batch_size,
                        cfg.mlp_max_epochs,
                        derive_seed(cfg.seed, f"mlp-train-{cfg.mode}-{cfg.task}"),
                        cfg.mlp_eval_every)
    best, history = mlp.train_with_early_stopping(net, (X, y), (Xv, yv), fit)
    cfg.task_dir.mkdir(parents=True, exist_ok=True)
    mlp.save_params(best, cfg.task_dir / "classifier.vxmc")
    _write_json(cfg.task_dir / "history.json",
                {"task": cfg.task, "mode": cfg.mode, **history})
    print(f"{cfg.mode} {cfg.task}: {n_classes} output units, best epoch "
          f"{history['best_epoch']} of {cfg.mlp_max_epochs}", file=out)
    return best, history


def render_table(workdir):
    """Accuracy table over every completed ``<mode>/<task>/metrics.json``."""
    root = Path(workdir)
    acc = {}
    for mode in MODES:
        for task in TASKS:
            path = root / mode / task / "metrics.json"
            if path.exists():
                acc[(mode, task)] = json.loads(path.read_text(encoding="utf-8"))["accuracy"]
    lines = [f"{'Classification':<16}{'Accuracy (2D)':<16}{'Accuracy (3D)':<16}"]
    for task, title in TASK_TITLES.items():
        if not any((m, task) in acc for m in MODES):
            continue
        cells = [mlp.format_accuracy(acc[(m, task)]) if (m, task) in acc else "-"
                 for m in ("2d", "3d")]
        lines.append(f"{title:<16}{cells[0]:<16}{cells[1]:<16}")
    return "\n".join(lines) + "\n"


def cmd_eval(cfg, table=False, out=None):
    cfg.validate()
    X, y = task_data(cfg, "test")
    net = mlp.load_params(cfg.task_dir / "classifier.vxmc")
    history = json.loads((cfg.task_dir / "history.json").read_text(encoding="utf-8"))
    metrics = mlp.evaluate(net, X, y)
    report = mlp.metrics_json(cfg.task, metrics, history)
    (cfg.task_dir / "metrics.json").write_text(report + "\n", encoding="utf-8")
    print(f"{cfg.mode} {TASK_TITLES[cfg.task]}: accuracy "
          f"{mlp.format_accuracy(metrics['accuracy'])}", file=out)
    print(f"confusion matrix: {metrics['confusion_matrix']}", file=out)
    if table:
        print(render_table(cfg.workdir), end="", file=out)
    return metrics


def cmd_export_slice(cfg, filter_index=3, slice_index=31, volume_index=0, output=None,
                     out=None):
    cfg.validate()
    entries = dataio.read_manifest(cfg.manifest_path)
    if not 0 <= volume_index < len(entries):
        raise ParameterError(f"volume_index {volume_index} outside [0, {len(entries)})")
    scan = _load_scan(cfg, entries[volume_index])
    bank = load_bank(cfg, scan.shape)
    output = Path(output) if output else (
        cfg.mode_dir / f"feature_f{filter_index}_s{slice_index}_v{volume_index}.pgm")
    image = convnet.export_feature_slice(scan, bank, filter_index, slice_index, output)
    print(f"wrote {output} ({image.shape[0]}x{image.shape[1]})", file=out)
    return image


def build_parser():
    parser = argparse.ArgumentParser(prog="voxelnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "pretrain", "featurize", "train", "eval", "export-slice"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--task", choices=tuple(TASKS))
        p.add_argument("--workdir")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        if name == "eval":
            p.add_argument("--table", action="store_true",
                           help="also print the accuracy table over completed runs")
        if name == "export-slice":
            p.add_argument("--filter-index", type=int, default=3)
            p.add_argument("--slice-index", type=int, default=31)
            p.add_argument("--volume-index", type=int, default=0)
            p.add_argument("--output")
    return parser


def load_config(args):
    cfg = RunConfig()
    if args.config:
        cfg = parse_config(Path(args.config).read_text(encoding="utf-8"), cfg)
    if args.set:
        cfg = parse_config("\n".join(args.set), cfg)
    for key in ("seed", "mode", "task", "workdir"):
        value = getattr(args, key)
        if value is not None:
            cfg = dataclasses.replace(cfg, **{key: value})
    if not 0 <= cfg.seed < 2**64:
        raise ParameterError("seed must be an unsigned 64-bit integer")
    return cfg.validate()


def main(argv=None, out=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "synth":
            cmd_synth(cfg, out=out)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, out=out)
        elif args.command == "featurize":
            cmd_featurize(cfg, out=out)
        elif args.command == "train":
            cmd_train(cfg, out=out)
        elif args.command == "eval":
            cmd_eval(cfg, table=args.table, out=out)
        else:
            cmd_export_slice(cfg, args.filter_index, args.slice_index, args.volume_index,
                             args.output, out=out)
    except (VoxelnetError, OSError) as exc:
        print(f"voxelnet {args.command}: error: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

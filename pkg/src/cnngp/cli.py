"""Command-line front end: ``cnngp {kernel,mc,regress,phase,datagen}``.

Every config key can be overridden with a flag of the same dotted name, e.g.
``cnngp kernel --config run.yaml --arch.depth=3 --data.seed 7``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets
from .config import ConfigError, RunConfig, parse_value
from .data_model import ClassKernel, CovFull, ShapeError, SpatialCollapseError
from .kernel_file import DigestMismatchError, KernelFile, load_kernel, save_kernel
from .mc import mc_estimate, mc_readout
from .propagation import TrackError, kernel_diagonal, kernel_matrix, phase_scan, propagate, uniform_grid
from .regress import LadderExhaustedError, RegressionProblem, accuracy, encode_labels, solve_with_ladder

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

COMMANDS = ("kernel", "mc", "regress", "phase", "datagen")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def load_raw(rc: RunConfig) -> datasets.RawDataset:
    """Raw images with ``train``/``test`` split tags as described by ``data``."""
    d = rc.raw["data"]
    source = d["source"]
    if source == "synth":
        return datasets.synth_dataset(rc.synth(), d["seed"])
    if source == "npz":
        if not d["npz"]:
            raise ConfigError("data.npz must name a file")
        return datasets.load_npz(d["npz"])
    if source == "cifar":
        if not d["paths"]:
            raise ConfigError("data.paths must list CIFAR-10 batch files")
        pool = datasets.load_cifar_binary(d["paths"], "train")
        test_pool = datasets.load_cifar_binary(d["test_paths"], "test") if d["test_paths"] else None
    else:
        if not (d["idx_images"] and d["idx_labels"]):
            raise ConfigError("data.idx_images and data.idx_labels are required")
        pool = datasets.load_idx(d["idx_images"], d["idx_labels"], d["num_classes"], "train")
        test_pool = None
        if d["idx_test_images"]:
            test_pool = datasets.load_idx(d["idx_test_images"], d["idx_test_labels"],
                                          d["num_classes"], "test")
    return _subsets(pool, test_pool, d["train_per_class"], d["test_per_class"], d["seed"])


def _subsets(pool, test_pool, train_per_class, test_per_class, seed):
    if train_per_class is None:
        train_idx = np.arange(len(pool))
    else:
        train_idx = datasets.balanced_subset_indices(pool, train_per_class, seed)
    train = pool.take(train_idx).with_split("train")
    if test_pool is not None:
        test = test_pool if test_per_class is None else \
            datasets.balanced_subset(test_pool, test_per_class, seed + 1)
    elif test_per_class is not None:
        # held-out validation drawn from the same pool, disjoint from training
        test = datasets.balanced_subset(pool, test_per_class, seed + 1, exclude=train_idx)
    else:
        return train
    return datasets.concat(train, test.with_split("test"))


def load_inputs(rc: RunConfig):
    """``(InputSet, RawDataset)`` after downsampling and normalization."""
    d = rc.raw["data"]
    raw = load_raw(rc)
    size = tuple(d["downsample"]) if d["downsample"] is not None else None
    if d["normalize"]:
        X = datasets.preprocess(raw, size, d["downsample_method"], d["normalize_first"])
    else:
        if size is not None:
            raw = datasets.downsample(raw, size[0], size[1], d["downsample_method"])
        X = datasets.to_input_set(raw, normalized=False)
    return X, raw


def _dataset_metadata(raw: datasets.RawDataset) -> dict:
    return {"labels": raw.labels.tolist(), "split": list(raw.split),
            "num_classes": int(raw.num_classes)}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _out_path(rc: RunConfig, args, default: Optional[str] = None) -> str:
    path = args.out or rc.raw["output"]["path"] or default
    if not path:
        raise ConfigError("no output path: pass --out or set output.path")
    return path


def _write_sidecar(path: str, rc: RunConfig, digest: int) -> None:
    with open(path + ".yaml", "w") as f:
        f.write(f"# arch digest {digest:#018x}\n")
        f.write(rc.dump())


def _save(path, obj, rc, digest, metadata):
    save_kernel(path, obj, digest, metadata)
    _write_sidecar(path, rc, digest)


def cmd_kernel(rc: RunConfig, args) -> int:
    cfg = rc.arch()
    X, raw = load_inputs(rc)
    out = _out_path(rc, args)
    digest = cfg.digest()
    meta = {"command": "kernel", **_dataset_metadata(raw)}
    k = rc.raw["kernel"]
    if k["payload"] != "class_kernel":
        track = "full" if k["payload"] == "cov_full" else "diag"
        if rc.track() not in (None, track):
            raise ConfigError(f"payload {k['payload']} needs the {track} track")
        trace = propagate(X, cfg, track)
        _save(out, trace.final, rc, digest, meta)
        print(f"wrote {k['payload']} layer {trace.final.layer} for {X.n_samples} samples to {out}")
        return EXIT_OK
    if k["blocks"] == "split":
        is_test = np.array([s == "test" for s in raw.split])
        if not is_test.any() or is_test.all():
            raise ConfigError("split blocks need both train and test samples")
        Xtr, Xte = X.subset(np.flatnonzero(~is_test)), X.subset(np.flatnonzero(is_test))
        blocks = {
            "train": kernel_matrix(Xtr, cfg, track=rc.track(), block_size=k["block_size"],
                                   threads=args.threads),
            "cross": kernel_matrix(Xte, cfg, Xtr, track=rc.track(), block_size=k["block_size"],
                                   threads=args.threads),
            "test_diag": ClassKernel(kernel_diagonal(Xte, cfg, rc.track())[:, None],
                                     cfg.readout.tag),
        }
        stem = out[:-5] if out.endswith(".nngk") else out
        for name, K in blocks.items():
            path = f"{stem}.{name}.nngk"
            _save(path, K, rc, digest, {**meta, "block": name})
            print(f"wrote {name} block {K.shape[0]}x{K.shape[1]} to {path}")
        return EXIT_OK
    K = kernel_matrix(X, cfg, track=rc.track(), block_size=k["block_size"], threads=args.threads)
    _save(out, K, rc, digest, {**meta, "block": "joint"})
    print(f"wrote {K.readout} class kernel {K.shape[0]}x{K.shape[1]} to {out}")
    return EXIT_OK


def cmd_mc(rc: RunConfig, args) -> int:
    cfg = rc.arch()
    mc = rc.raw["mc"]
    X, raw = load_inputs(rc)
    out = _out_path(rc, args)
    est = mc_estimate(X, cfg, mc["n"], mc["M"], mc["seed"], rc.track(), args.threads)
    meta = {"command": "mc", "n": mc["n"], "M": mc["M"], "seed": mc["seed"],
            "block": "joint", **_dataset_metadata(raw)}
    payload = rc.raw["kernel"]["payload"]
    if payload == "class_kernel":
        obj = mc_readout(est, cfg)
    else:
        obj = est.kernel
        if (payload == "cov_full") != isinstance(obj, CovFull):
            raise ConfigError(f"payload {payload} does not match the estimated track")
    _save(out, obj, rc, cfg.digest(), meta)
    print(f"wrote MC estimate (n={mc['n']}, M={mc['M']}, seed={mc['seed']}) to {out}")
    return EXIT_OK


def _problem_from_files(files, digest, force, noise):
    loaded = [load_kernel(p, digest, force) for p in files]
    for f in loaded:
        if f.kind != "class_kernel":
            raise ConfigError("regression needs class-kernel files")
    blocks = {f.metadata.get("block", "joint"): f for f in loaded}
    if len(blocks) != len(loaded):
        raise ConfigError("duplicate kernel blocks given")
    if set(blocks) == {"joint"}:
        f = blocks["joint"]
        labels, split = _labels(f)
        train = np.flatnonzero(split != "test")
        test = np.flatnonzero(split == "test")
        K = f.data.matrix
        if K.shape[0] != labels.size:
            raise ShapeError(f"kernel has {K.shape[0]} rows but {labels.size} labels")
        if test.size == 0 or train.size == 0:
            raise ConfigError("joint kernel needs both train and test samples")
        C = int(f.metadata.get("num_classes", labels.max() + 1))
        problem = RegressionProblem.from_kernel(K, train, test, encode_labels(labels[train], C), noise)
        return problem, labels[test], f
    if set(blocks) != {"train", "cross", "test_diag"}:
        raise ConfigError(f"expected one joint file or train/cross/test_diag blocks, got {sorted(blocks)}")
    f = blocks["train"]
    labels, split = _labels(f)
    train, test = labels[split != "test"], labels[split == "test"]
    Ktr, Kx, kd = blocks["train"].data.matrix, blocks["cross"].data.matrix, blocks["test_diag"].data.matrix
    if Ktr.shape[0] != train.size or Kx.shape[0] != test.size:
        raise ShapeError("kernel blocks do not match the recorded label split")
    C = int(f.metadata.get("num_classes", labels.max() + 1))
    return RegressionProblem(Ktr, Kx, kd.ravel(), encode_labels(train, C), noise), test, f


def _labels(f: KernelFile):
    if "labels" not in f.metadata:
        raise ConfigError("kernel file carries no labels")
    labels = np.asarray(f.metadata["labels"], dtype=np.int64)
    split = np.asarray(f.metadata.get("split", ["train"] * labels.size))
    if split.size != labels.size:
        raise ShapeError("label and split lengths differ")
    return labels, split


def regress_report(rc: RunConfig, files, force: bool = False) -> dict:
    r = rc.raw["regress"]
    problem, test_labels, f = _problem_from_files(files, rc.arch().digest(), force, float(r["noise"]))
    ladder = rc.ladder()
    res = solve_with_ladder(problem, ladder, r["noisy_variance"])
    pred = res.predicted
    return {
        "readout": f.readout,
        "digest": f"{f.digest:#018x}",
        "n_train": problem.K_train.shape[0],
        "n_test": test_labels.size,
        "num_classes": problem.targets.shape[1],
        "noise": problem.noise,
        "ladder": f"{ladder.start}..{ladder.stop}" + (" scaled" if ladder.scale_by_diag_mean else ""),
        "rung": res.rung,
        "failed_rungs": ",".join(str(e) for e in res.failed_rungs) or "none",
        "regularization": res.regularization,
        "accuracy": accuracy(res, test_labels),
        "correct": int(np.sum(pred == test_labels)),
        "mean_variance": float(np.mean(res.variance)),
    }


def format_report(report: dict) -> str:
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n"
                   for k, v in report.items())


def cmd_regress(rc: RunConfig, args) -> int:
    if not args.kernels:
        raise ConfigError("regress needs at least one kernel file")
    rep = regress_report(rc, args.kernels, args.force)
    print(f"GP regression on {rep['n_train']} train / {rep['n_test']} test samples "
          f"({rep['num_classes']} classes, readout {rep['readout']})")
    print(f"  regularization 1e{rep['rung']} -> {rep['regularization']:.3e}"
          f" (failed rungs: {rep['failed_rungs']})")
    print(f"  accuracy {rep['accuracy']:.4f} ({rep['correct']}/{rep['n_test']})")
    out = args.out or rc.raw["output"]["report"]
    if out:
        with open(out, "w") as fh:
            fh.write(format_report(rep))
    return EXIT_OK


def phase_rows(rc: RunConfig, threads: int = 1) -> list:
    p = rc.raw["phase"]
    grid = uniform_grid(tuple(p["w_range"]), tuple(p["b_range"]), tuple(p["size"]))
    return phase_scan(grid, p["nonlinearity"], int(p["max_depth"]), float(p["c0"]), threads)


def format_phase(points) -> str:
    lines = ["sigma_w2\tsigma_b2\tq_star\tc_star\trate\tlabel"]
    for pt in points:
        c = "nan" if pt.c_star is None else repr(pt.c_star)
        lines.append(f"{pt.sigma_w2!r}\t{pt.sigma_b2!r}\t{pt.q_star!r}\t{c}\t{pt.rate!r}\t{pt.label}")
    return "\n".join(lines) + "\n"


def cmd_phase(rc: RunConfig, args) -> int:
    table = format_phase(phase_rows(rc, args.threads))
    out = args.out or rc.raw["output"]["path"]
    if out:
        with open(out, "w") as f:
            f.write(table)
    else:
        sys.stdout.write(table)
    return EXIT_OK


def cmd_datagen(rc: RunConfig, args) -> int:
    raw = load_raw(rc)
    out = _out_path(rc, args)
    datasets.save_npz(out, raw)
    counts = ",".join(str(c) for c in raw.class_counts())
    print(f"wrote {len(raw)} images {raw.images.shape[1:]} (class counts {counts}) to {out}")
    return EXIT_OK


HANDLERS = {"kernel": cmd_kernel, "mc": cmd_mc, "regress": cmd_regress,
            "phase": cmd_phase, "datagen": cmd_datagen}


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnngp", description="NN-GP kernels for CNNs",
                                     allow_abbrev=False)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("kernels", nargs="*", help="kernel files (regress only)")
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--threads", type=int, default=1, help="worker cap")
    parser.add_argument("--force", action="store_true",
                        help="load kernels even if the architecture digest differs")
    parser.add_argument("--out", help="output path")
    return parser


def _is_override(tok: str) -> bool:
    return tok.startswith("--") and "." in tok.split("=", 1)[0]


def split_overrides(argv) -> tuple:
    """Separate dotted overrides from the remaining arguments.

    ``['kernel', '--a.b=1', '--c.d', 'x']`` -> ``(['kernel'], [('a.b', 1), ('c.d', 'x')])``.
    Done before argparse, which would treat values containing spaces as positionals.
    """
    rest, out, i = [], [], 0
    while i < len(argv):
        tok = argv[i]
        if not _is_override(tok):
            rest.append(tok)
            i += 1
            continue
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(argv):
                raise ConfigError(f"override {tok} has no value")
            key, val = tok[2:], argv[i + 1]
            i += 2
        out.append((key, parse_value(val)))
    return rest, out


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        rest, overrides = split_overrides(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parser = build_parser()
    args = parser.parse_args(rest)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.kernels and args.command != "regress":
            raise ConfigError(f"{args.command} takes no positional arguments")
        rc = RunConfig.load(args.config, overrides)
        with threadpool_limits(limits=args.threads):
            return HANDLERS[args.command](rc, args)
    except (SpatialCollapseError, LadderExhaustedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, TrackError, DigestMismatchError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, datasets.DatasetFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

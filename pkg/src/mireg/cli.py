"""Command-line pipeline: gen, train, register, eval, sweep, response-map.

Every command is driven by a flat JSON config (RunConfig keys) with flags
taking precedence over file values, and echoes the resolved config next to
its artifacts so runs are auditable. Exit codes: 0 success, 2 configuration
error, 3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, NumericError
from .estimator import MineRegistration
from .evalkit import (EvalRecord, benchmark_runtime,
                      count_nonpositive_jacobian, dice, sweep_alpha,
                      write_records)
from .regnet import load_checkpoint
from .similarity import LOSS_KINDS, StatNet, joint_response_map
from .synthdata import (LabelMap, Volume, apply_modality, gen_labeled_shape,
                        gen_pair, read_volume, vee_curve, write_volume)
from .transform import warp_labels

TASKS = ("mono", "multi")


@dataclass
class RunConfig:
    """Flat experiment description; JSON keys mirror the field names."""

    task: str = "mono"
    loss: str = "mine-local"
    alpha: float = 1.0
    lam: float = 10.0
    width: int = 30            # critic hidden units
    n_radius: int = 8          # local shuffle box half-width
    steps: int = 7             # scaling-and-squaring rounds
    epochs: int = 300          # desk-scale default; the full-length 1500 goes in the config
    lr: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    batch: int = 1
    seed: int = 0
    dims: tuple = (192, 192)
    levels: int = 3
    channels: tuple = (16, 32, 32)
    head_stride: int = 2
    n_subjects: int = 10
    n_labels: int = 8
    deform_magnitude: float = 4.0
    smoothness: float = 8.0
    texture: float = 0.15
    modality_noise: float = 0.02
    modality_bias: float = 0.1
    split: tuple = (0.7, 0.1, 0.2)
    data: str = "dataset"
    out: str = "runs"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(
                f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.batch != 1:
            raise ConfigurationError("only batch size 1 is supported")
        self.dims = tuple(int(n) for n in self.dims)
        self.channels = tuple(int(c) for c in self.channels)
        self.split = tuple(float(s) for s in self.split)
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError("split must be three fractions summing to 1")
        if self.n_subjects < 1:
            raise ConfigurationError("n_subjects must be >= 1")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.lam <= 0:
            raise ConfigurationError("lam must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if min(self.width, self.n_radius + 1, self.steps) < 1:
            raise ConfigurationError("width/n_radius/steps out of range")
        if not 0.0 <= self.texture <= 0.2:
            raise ConfigurationError("texture must be in [0, 0.2]")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config {path}: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"config {path}: unknown keys {unknown}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["channels"] = list(self.channels)
        d["split"] = list(self.split)
        return d


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) \
        else RunConfig()
    for flag in ("task", "loss", "alpha", "seed", "epochs", "data", "out"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    cfg.__post_init__()    # re-validate after overrides
    return cfg


def _echo_config(out_dir: Path, cfg: RunConfig, command: str) -> None:
    payload = {"command": command, "config": cfg.to_dict()}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2,
                                                    sort_keys=True) + "\n")


def _subject_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _split_counts(n: int, split) -> list:
    n_train = int(n * split[0])
    n_val = int(n * split[1])
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def cmd_gen(cfg: RunConfig) -> int:
    """Write an atlas plus deformed subjects as MVOL files + manifest."""
    out = Path(cfg.data)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create dataset dir {out}: {exc}") from exc

    atlas_rng = np.random.default_rng(_subject_seed(cfg.seed, 0))
    vol, lab = gen_labeled_shape(atlas_rng, dims=cfg.dims, n_labels=cfg.n_labels,
                                 texture=cfg.texture)
    write_volume(out / "atlas_volume.mvol", vol)
    write_volume(out / "atlas_labels.mvol", lab)

    curve = vee_curve(noise_sd=cfg.modality_noise, bias_amplitude=cfg.modality_bias)
    splits = _split_counts(cfg.n_subjects, cfg.split)
    subjects = []
    for i in range(cfg.n_subjects):
        seed_i = _subject_seed(cfg.seed, i + 1)
        srng = np.random.default_rng(seed_i)
        pair = gen_pair(srng, (vol, lab), deform_magnitude=cfg.deform_magnitude,
                        smoothness=cfg.smoothness, steps=cfg.steps)
        sid = f"s{i:03d}"
        files = {"mono": f"{sid}_mono.mvol", "labels": f"{sid}_labels.mvol",
                 "disp": f"{sid}_disp.mvol"}
        write_volume(out / files["mono"], pair.volume)
        write_volume(out / files["labels"], pair.labels)
        write_volume(out / files["disp"], pair.disp)
        if cfg.task == "multi":
            files["multi"] = f"{sid}_multi.mvol"
            write_volume(out / files["multi"], apply_modality(pair.volume, curve, srng))
        subjects.append({"id": sid, "seed": seed_i, "split": splits[i],
                         "files": files})

    manifest = {"config": cfg.to_dict(), "atlas": {"volume": "atlas_volume.mvol",
                                                   "labels": "atlas_labels.mvol"},
                "subjects": subjects}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                  sort_keys=True) + "\n")
    print(f"gen: wrote {cfg.n_subjects} subjects to {out}")
    return 0


def _load_dataset(data_dir, task: str):
    """Manifest -> dict of per-split (pairs, label_pairs) arrays."""
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{mpath}: manifest not found")
    try:
        manifest = json.loads(mpath.read_text())
        atlas_vol = read_volume(data_dir / manifest["atlas"]["volume"])
        atlas_lab = read_volume(data_dir / manifest["atlas"]["labels"])
        subjects = manifest["subjects"]
    except (json.JSONDecodeError, KeyError, TypeError, OSError) as exc:
        raise FormatError(f"{mpath}: unusable manifest ({exc})") from exc
    if not isinstance(atlas_vol, Volume) or not isinstance(atlas_lab, LabelMap):
        raise FormatError(f"{mpath}: atlas volume/labels have swapped kinds")

    key = "multi" if task == "multi" else "mono"
    out = {s: {"pairs": [], "labels": [], "ids": []}
           for s in ("train", "val", "test")}
    for sub in subjects:
        if key not in sub["files"]:
            raise FormatError(
                f"{mpath}: subject {sub['id']} lacks a {key!r} volume; "
                f"regenerate the dataset with task={task}")
        try:
            v = read_volume(data_dir / sub["files"][key])
            l = read_volume(data_dir / sub["files"]["labels"])
            bucket = out[sub["split"]]
        except (OSError, KeyError) as exc:
            raise FormatError(f"{mpath}: subject {sub['id']} unreadable ({exc})") from exc
        if not isinstance(v, Volume) or not isinstance(l, LabelMap):
            raise FormatError(f"{mpath}: subject {sub['id']} files have wrong kinds")
        bucket["pairs"].append(np.stack([atlas_vol.data, v.data]))
        bucket["labels"].append(np.stack([atlas_lab.labels.astype(np.int64),
                                          l.labels.astype(np.int64)]))
        bucket["ids"].append(sub["id"])
    for bucket in out.values():
        if bucket["pairs"]:
            bucket["pairs"] = np.stack(bucket["pairs"])
            bucket["labels"] = np.stack(bucket["labels"])
    return out, manifest


def _estimator_from_config(cfg: RunConfig, verbose: int = 1) -> MineRegistration:
    return MineRegistration(loss=cfg.loss, alpha=cfg.alpha, lam=cfg.lam,
                            width=cfg.width, n_radius=cfg.n_radius,
                            steps=cfg.steps, epochs=cfg.epochs, lr=cfg.lr,
                            beta1=cfg.beta1, beta2=cfg.beta2, levels=cfg.levels,
                            channels=cfg.channels, head_stride=cfg.head_stride,
                            seed=cfg.seed,
                            verbose=verbose)


def _write_train_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total_loss", "dv_bound", "regularizer", "val_dice"])
        for row in history:
            w.writerow([row["epoch"], repr(row["total_loss"]),
                        repr(row["similarity"]), repr(row["regularizer"]),
                        "" if row["val_dice"] is None else repr(row["val_dice"])])


def cmd_train(cfg: RunConfig) -> int:
    """Fit the configured model; write checkpoints, log, and config echo."""
    data, _ = _load_dataset(cfg.data, cfg.task)
    if len(data["train"]["ids"]) == 0:
        raise ConfigurationError(f"{cfg.data}: dataset has no training subjects")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, cfg, "train")

    validation = None
    if len(data["val"]["ids"]) > 0:
        validation = (data["val"]["pairs"], data["val"]["labels"])
    est = _estimator_from_config(cfg)
    est.fit(data["train"]["pairs"], validation=validation)

    _write_train_log(out / "train_log.csv", est.history_)
    est.save(out / "checkpoint_final.zip", extra=cfg.to_dict())
    if est.best_state_ is not None:
        est.save(out / "checkpoint_best.zip", extra=cfg.to_dict(),
                 state=est.best_state_)
    last = est.history_[-1]
    vd = "-" if last["val_dice"] is None else f"{last['val_dice']:.4f}"
    print(f"train: {cfg.epochs} epochs done, final loss "
          f"{last['total_loss']:+.4f}, val dice {vd}, artifacts in {out}")
    return 0


def cmd_register(args) -> int:
    """Warp one moving volume onto one fixed volume with a trained model."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fixed = read_volume(args.fixed)
    moving = read_volume(args.moving)
    if not isinstance(fixed, Volume) or not isinstance(moving, Volume):
        raise FormatError("register: fixed/moving must be float volumes")
    if fixed.dims != moving.dims:
        raise ConfigurationError(
            f"register: fixed dims {fixed.dims} != moving dims {moving.dims}")

    run_echo = {"command": "register", "fixed": str(args.fixed),
                "moving": str(args.moving), "zero_velocity": args.zero_velocity}
    if args.zero_velocity:
        # identity override: exact copy of the moving image, zero field
        method, alpha, lam, seed = "identity", 0.0, 0.0, 0
        field = np.zeros((len(moving.dims),) + moving.dims, dtype=np.float32)
        warped = moving.data.copy()
        med, sd = benchmark_runtime(lambda: None, repeats=max(1, args.repeats))
    else:
        if not args.checkpoint:
            raise ConfigurationError("register: --checkpoint is required "
                                     "unless --zero-velocity is set")
        est = MineRegistration.load(args.checkpoint)
        est.critic_ = None     # not on the inference path
        if tuple(est.config_.dims) != fixed.dims:
            raise ConfigurationError(
                f"register: checkpoint dims {tuple(est.config_.dims)} != "
                f"volume dims {fixed.dims}")
        method, alpha, lam, seed = est.loss, est.alpha, est.lam, est.seed
        run_echo["checkpoint"] = str(args.checkpoint)
        holder = {}

        def run_once():
            holder["result"] = est.register(fixed.data, moving.data)

        med, sd = benchmark_runtime(run_once, repeats=max(1, args.repeats))
        warped, field = holder["result"]

    write_volume(out / "warped.mvol", Volume(np.clip(warped, 0.0, 1.0)))
    write_volume(out / "displacement.mvol", field.astype(np.float32))

    mean_dice, per_label = float("nan"), {}
    if args.fixed_labels and args.moving_labels:
        flab = read_volume(args.fixed_labels)
        mlab = read_volume(args.moving_labels)
        if not isinstance(flab, LabelMap) or not isinstance(mlab, LabelMap):
            raise FormatError("register: label inputs must be label maps")
        moved = warp_labels(mlab.labels, field)
        per_label, mean_dice = dice(flab.labels, moved)
        write_volume(out / "warped_labels.mvol", moved)
    count, frac = count_nonpositive_jacobian(field)
    record = EvalRecord(method=method, alpha=alpha, lam=lam, seed=seed,
                        mean_dice=mean_dice, dice_per_label=per_label,
                        nonpos_jac_count=count, nonpos_jac_frac=frac,
                        runtime_s_median=med, runtime_s_sd=sd)
    write_records(out / "record.csv", [record])
    (out / "config.json").write_text(json.dumps(run_echo, indent=2,
                                                sort_keys=True) + "\n")
    print(f"register: wrote warped.mvol + displacement.mvol to {out} "
          f"(runtime median {med:.3f}s, folds {count})")
    return 0


def _evaluate_split(est: MineRegistration, pairs, labels, repeats: int) -> EvalRecord:
    fields_pred = est.predict(pairs)
    dices, per_label_all = [], []
    count_total, inner_total = 0, 0
    for i in range(pairs.shape[0]):
        moved = warp_labels(labels[i, 1], fields_pred[i])
        per_label, mean = dice(labels[i, 0], moved)
        dices.append(mean)
        per_label_all.append(per_label)
        c, _ = count_nonpositive_jacobian(fields_pred[i])
        count_total += c
        inner_total += int(np.prod([n - 2 for n in fields_pred[i].shape[1:]]))
    label_keys = sorted({k for d in per_label_all for k in d})
    per_label_mean = {k: float(np.mean([d[k] for d in per_label_all if k in d]))
                      for k in label_keys}
    f0, m0 = pairs[0, 0], pairs[0, 1]
    med, sd = benchmark_runtime(lambda: est.register(f0, m0), repeats=repeats)
    return EvalRecord(method=est.loss, alpha=est.alpha, lam=est.lam,
                      seed=est.seed, mean_dice=float(np.mean(dices)),
                      dice_per_label=per_label_mean,
                      nonpos_jac_count=count_total,
                      nonpos_jac_frac=count_total / max(inner_total, 1),
                      runtime_s_median=med, runtime_s_sd=sd)


def cmd_eval(args) -> int:
    """Score a checkpoint on the dataset's test split; write results.csv."""
    est = MineRegistration.load(args.checkpoint)
    est.critic_ = None
    ckpt_config, _, _ = load_checkpoint(args.checkpoint)
    task = args.task or ckpt_config.get("run", {}).get("task", "mono")
    data, _ = _load_dataset(args.data, task)
    if len(data["test"]["ids"]) == 0:
        raise ConfigurationError(f"{args.data}: dataset has no test subjects")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = _evaluate_split(est, data["test"]["pairs"], data["test"]["labels"],
                             repeats=args.repeats)
    write_records(out / "results.csv", [record])
    (out / "config.json").write_text(json.dumps(
        {"command": "eval", "checkpoint": str(args.checkpoint),
         "task": task, "data": str(args.data)}, indent=2, sort_keys=True) + "\n")
    print(f"eval: mean dice {record.mean_dice:.4f}, folds "
          f"{record.nonpos_jac_count}, results in {out}")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    """Train/evaluate the (alpha x method) grid; write sweep.csv."""
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a]
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"sweep: bad --alphas value ({exc})") from exc
    for m in methods:
        if m not in LOSS_KINDS:
            raise ConfigurationError(f"sweep: unknown method {m!r}")
    data, _ = _load_dataset(cfg.data, cfg.task)
    if not len(data["train"]["ids"]) or not len(data["test"]["ids"]):
        raise ConfigurationError(f"{cfg.data}: sweep needs train and test subjects")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, cfg, "sweep")

    def run_one(method: str, alpha: float) -> EvalRecord:
        print(f"sweep: training method={method} alpha={alpha}", flush=True)
        run_cfg = RunConfig(**{**cfg.to_dict(), "loss": method, "alpha": alpha})
        est = _estimator_from_config(run_cfg, verbose=0)
        est.fit(data["train"]["pairs"])
        return _evaluate_split(est, data["test"]["pairs"],
                               data["test"]["labels"], repeats=args.repeats)

    records = sweep_alpha(alphas, methods, run_one)
    write_records(out / "sweep.csv", records)
    print(f"sweep: wrote {len(records)} records to {out / 'sweep.csv'}")
    return 0


def cmd_response_map(args) -> int:
    """Emit the trained critic's normalized joint response as a CSV matrix."""
    config, _, stat_state = load_checkpoint(args.checkpoint)
    if stat_state is None:
        raise ConfigurationError(
            f"{args.checkpoint}: checkpoint holds no critic (loss was not MI-based)")
    try:
        width = int(config["params"]["width"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{args.checkpoint}: config lacks critic width") from exc
    net = StatNet(width=width)
    net.load_state_dict(stat_state)
    response, grid = joint_response_map(net, grid_res=args.grid_res)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "response_map.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([repr(float(g)) for g in grid])
        for row in response:
            w.writerow([repr(float(x)) for x in row])
    if args.plot:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            print("response-map: matplotlib unavailable, skipping PNG",
                  file=sys.stderr)
        else:
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.imshow(response, origin="lower", extent=[0, 1, 0, 1])
            ax.set_xlabel("moving intensity")
            ax.set_ylabel("fixed intensity")
            fig.savefig(out / "response_map.png", dpi=120)
            plt.close(fig)
    print(f"response-map: wrote {args.grid_res}x{args.grid_res} matrix to {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mireg",
        description="Deformable registration with a learned MI similarity.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, loss=True):
        p.add_argument("--config", help="JSON file with RunConfig keys")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if loss:
            p.add_argument("--loss", choices=LOSS_KINDS, default=None)
            p.add_argument("--alpha", type=float, default=None)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, loss=False)
    p.add_argument("--task", choices=TASKS, default=None)
    p.add_argument("--data", default=None, help="dataset directory to write")

    p = sub.add_parser("train", help="train a registration model")
    common(p)
    p.add_argument("--task", choices=TASKS, default=None)
    p.add_argument("--data", default=None, help="dataset directory to read")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("register", help="register one pair with a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed-labels", default=None)
    p.add_argument("--moving-labels", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--zero-velocity", action="store_true",
                   help="emit the identity transform instead of a prediction")
    p.add_argument("--repeats", type=int, default=1)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=TASKS, default=None)
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("sweep", help="alpha x method training sweep")
    common(p, loss=False)
    p.add_argument("--task", choices=TASKS, default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--alphas", default="0.5,1,2,5,10")
    p.add_argument("--methods", default="mine-local,mse")
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("response-map",
                       help="dump the critic's joint intensity response")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-res", type=int, default=64)
    p.add_argument("--plot", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            cfg = _resolve_config(args)
            if args.data is None and args.out is not None:
                cfg.data = args.out    # --out names the dataset dir for gen
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(_resolve_config(args))
        if args.command == "register":
            return cmd_register(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "sweep":
            return cmd_sweep(_resolve_config(args), args)
        return cmd_response_map(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end: gen-data, train, eval, rollout.

Every command is a deterministic function of (config, seed): reruns produce
byte-identical datasets, histories, checkpoints and exports. Exit codes:
0 success, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .automaton import damage as damage_state
from .automaton import dynamic_rollout, state_from_frame
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .egc import AutomatonState, egc_forward
from .graphs import (
    DatasetSplit,
    GeometricGraph,
    gen_community,
    gen_planar,
    gen_sbm,
    grid2d,
    load_edge_list,
    load_point_cloud,
    save_edge_list,
    split,
    torus3d,
)
from .metrics import trajectory_complexity, velocity_mse
from .simulators import (
    BoidsConfig,
    NBodyConfig,
    Trajectory,
    gen_boids_trajectory,
    gen_nbody_dataset,
    load_trajectory,
    save_trajectory,
)
from .tensor import NonFiniteError, Tensor
from .training import (
    AutoencoderConfig,
    AutoencoderTrainer,
    PatternConfig,
    PatternTrainer,
    SimulatorConfig,
    SimulatorTrainer,
    evaluate_autoencoder,
    evaluate_pattern,
    finetune_threshold,
)

USAGE_EXIT = 2
NUMERICAL_EXIT = 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.set("run", "seed", args.seed)
    if getattr(args, "out", None) is not None:
        cfg.set("run", "out", args.out)
    if getattr(args, "threads", None) is not None:
        cfg.set("run", "threads", args.threads)
    cfg.validate()
    return cfg


def _prepare_out(cfg: RunConfig) -> str:
    out = cfg["run"]["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    return out


def _warn_nonstandard_dims(cfg: RunConfig) -> None:
    h, m = cfg["model"]["hidden_dim"], cfg["model"]["message_dim"]
    if (h, m) != (16, 32):
        print(f"warning: hidden_dim={h} message_dim={m} differ from the reference 16/32",
              file=sys.stderr)


# ---------------------------------------------------------------------------
# task assembly


def build_target(cfg: RunConfig) -> GeometricGraph:
    p = cfg["pattern"]
    if p["target"] == "grid":
        return grid2d(p["rows"], p["cols"], p["spacing"])
    if p["target"] == "torus":
        return torus3d(p["rows"], p["cols"], p["torus_major"], p["torus_minor"])
    if p["target"] == "points":
        if not p["points_path"]:
            raise UsageError("pattern.target=points needs pattern.points_path")
        return load_point_cloud(p["points_path"], k=p["knn_k"])
    raise UsageError(f"unknown pattern.target '{p['target']}'")


def build_graph_datasets(cfg: RunConfig) -> DatasetSplit:
    a = cfg["autoencode"]
    if a["data_path"]:
        names = sorted(
            f for f in os.listdir(a["data_path"]) if f.startswith("graph_") and f.endswith(".txt")
        )
        if not names:
            raise UsageError(f"no graph_*.txt files under {a['data_path']}")
        graphs = [load_edge_list(os.path.join(a["data_path"], f)) for f in names]
    elif a["dataset"] == "comm-s":
        graphs = gen_community(a["n_graphs"], a["nodes_lo"], a["nodes_hi"], a["data_seed"])
    elif a["dataset"] in ("planar-s", "planar-l"):
        graphs = gen_planar(a["n_graphs"], a["nodes_lo"], a["nodes_hi"], a["data_seed"])
    elif a["dataset"] == "sbm":
        graphs = gen_sbm(a["n_graphs"], seed=a["data_seed"])
    else:
        raise UsageError(f"unknown autoencode.dataset '{a['dataset']}'")
    return split(graphs, a["data_seed"])


def boids_config(cfg: RunConfig) -> BoidsConfig:
    s = cfg["simulate"]
    return BoidsConfig(
        n_boids=s["n_boids"],
        half_side=s["half_side"],
        radius=s["radius"],
        separation_dist=s["separation_dist"],
        cohesion=s["cohesion"],
        alignment=s["alignment"],
        separation=s["separation"],
        wall=s["wall"],
        wall_margin=s["wall_margin"],
        max_speed=s["max_speed"],
        dt=s["dt"],
    )


def build_trajectories(cfg: RunConfig, threads: int = 1) -> list[Trajectory]:
    s = cfg["simulate"]
    if s["data_path"]:
        names = sorted(
            f for f in os.listdir(s["data_path"]) if f.startswith("traj_") and f.endswith(".txt")
        )
        if not names:
            raise UsageError(f"no traj_*.txt files under {s['data_path']}")
        return [load_trajectory(os.path.join(s["data_path"], f)) for f in names]
    if s["system"] == "boids":
        bc = boids_config(cfg)
        indices = range(s["n_traj"])
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(
                    pool.map(lambda i: gen_boids_trajectory(i, s["traj_len"], s["data_seed"], bc), indices)
                )
        return [gen_boids_trajectory(i, s["traj_len"], s["data_seed"], bc) for i in indices]
    if s["system"] == "nbody":
        nc = NBodyConfig(n_bodies=s["n_bodies"], dt=s["nbody_dt"], softening=s["softening"])
        return gen_nbody_dataset(s["n_traj"], s["traj_len"], s["data_seed"], nc)
    raise UsageError(f"unknown simulate.system '{s['system']}'")


def build_trainer(cfg: RunConfig, threads: int = 1):
    task = cfg.task
    model = cfg["model"]
    optim = cfg["optim"]
    if task == "pattern":
        p = cfg["pattern"]
        target = build_target(cfg)
        tc = PatternConfig(
            pool_size=p["pool_size"], sigma=p["sigma"], t_min=p["t_min"], t_max=p["t_max"],
            batch_min=p["batch_min"], batch_max=p["batch_max"], max_steps=p["max_steps"],
            lr=cfg.lr(), weight_decay=optim["weight_decay"], clip_norm=optim["clip_norm"],
            plateau_patience=p["plateau_patience"], plateau_factor=optim["plateau_factor"],
            lr_floor=optim["lr_floor"],
            damage_magnitude=p["damage_magnitude"] or None,
            damage_radius=p["damage_radius"] or None,
            val_every=p["val_every"], val_states=p["val_states"], val_t=p["val_t"],
            hidden_dim=model["hidden_dim"], message_dim=model["message_dim"],
            normalization=model["normalization"],
        )
        return PatternTrainer(target, tc, cfg.seed)
    if task == "autoencode":
        a = cfg["autoencode"]
        datasets = build_graph_datasets(cfg)
        tc = AutoencoderConfig(
            coord_dim=model["coord_dim"], pool_size=a["pool_size"], sigma=a["sigma"],
            t_min=a["t_min"], t_max=a["t_max"], max_replacements=a["max_replacements"],
            batch_graphs=a["batch_graphs"], max_epochs=a["max_epochs"],
            early_stop_patience=a["early_stop_patience"], plateau_patience=a["plateau_patience"],
            plateau_factor=optim["plateau_factor"], lr=cfg.lr(), lr_floor=optim["lr_floor"],
            weight_decay=optim["weight_decay"], clip_norm=optim["clip_norm"],
            neg_ratio=a["neg_ratio"], delta1_init=a["delta1_init"], delta2_init=a["delta2_init"],
            t_eval=a["t_eval"], val_t=a["val_t"],
            hidden_dim=model["hidden_dim"], message_dim=model["message_dim"],
            normalization=model["normalization"],
        )
        return AutoencoderTrainer(datasets, tc, cfg.seed)
    if task == "simulate":
        s = cfg["simulate"]
        trajectories = build_trajectories(cfg, threads)
        tc = SimulatorConfig(
            radius=s["radius"], sub_len=s["sub_len"], batch_size=s["batch_size"],
            max_epochs=s["max_epochs"], batches_per_epoch=s["batches_per_epoch"],
            early_stop_patience=s["early_stop_patience"], plateau_patience=s["plateau_patience"],
            plateau_factor=optim["plateau_factor"], lr=cfg.lr(), lr_floor=optim["lr_floor"],
            weight_decay=optim["weight_decay"], clip_norm=optim["clip_norm"],
            hidden_dim=model["hidden_dim"], message_dim=model["message_dim"],
            normalization=model["normalization"],
            fully_connected=(s["system"] == "nbody"),
        )
        return SimulatorTrainer(trajectories, tc, cfg.seed)
    raise UsageError(f"unknown task '{task}'")


def _save_trainer_checkpoint(path, cfg: RunConfig, trainer, best: bool = False) -> None:
    arrays, meta = trainer.state_payload()
    if best and getattr(trainer, "best_params", None):
        named = dict(arrays)
        for key, val in trainer.best_params.items():
            named[key] = val.copy()
        arrays = list(named.items())
        meta = dict(meta)
        meta["holds_best_params"] = True
    meta["task"] = cfg.task
    save_checkpoint(path, cfg.to_dict(), arrays, meta)


def _restore_trainer(path):
    config_dict, arrays, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(config_dict)
    trainer = build_trainer(cfg)
    trainer.load_payload(arrays, meta)
    return cfg, trainer, meta


# ---------------------------------------------------------------------------
# gen-data


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    task = cfg.task
    if task not in ("autoencode", "simulate"):
        raise UsageError("gen-data supports tasks: autoencode, simulate")
    out = _prepare_out(cfg)
    data_dir = os.path.join(out, "data")
    os.makedirs(data_dir, exist_ok=True)
    files = []
    if task == "autoencode":
        a = cfg["autoencode"]
        if a["dataset"] == "comm-s":
            graphs = gen_community(a["n_graphs"], a["nodes_lo"], a["nodes_hi"], a["data_seed"])
        elif a["dataset"] in ("planar-s", "planar-l"):
            graphs = gen_planar(a["n_graphs"], a["nodes_lo"], a["nodes_hi"], a["data_seed"])
        elif a["dataset"] == "sbm":
            graphs = gen_sbm(a["n_graphs"], seed=a["data_seed"])
        else:
            raise UsageError(f"unknown autoencode.dataset '{a['dataset']}'")
        for i, g in enumerate(graphs):
            name = f"graph_{i:05d}.txt"
            save_edge_list(os.path.join(data_dir, name), g)
            files.append(name)
        seed = a["data_seed"]
    else:
        trajectories = build_trajectories(cfg, cfg["run"]["threads"])
        for i, traj in enumerate(trajectories):
            name = f"traj_{i:05d}.txt"
            save_trajectory(os.path.join(data_dir, name), traj)
            files.append(name)
        seed = cfg["simulate"]["data_seed"]
    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"task {task}\n")
        fh.write(f"count {len(files)}\n")
        fh.write(f"seed {seed}\n")
        for name in files:
            fh.write(f"file {name} sha256 {_sha256(os.path.join(data_dir, name))}\n")
    print(f"wrote {len(files)} files to {data_dir}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    if args.checkpoint:
        cfg, trainer, _ = _restore_trainer(args.checkpoint)
        if args.config:
            cfg = _load_config(args)
            trainer_new = build_trainer(cfg, cfg["run"]["threads"])
            _, arrays, meta = load_checkpoint(args.checkpoint)
            trainer_new.load_payload(arrays, meta)
            trainer = trainer_new
        resumed = True
    else:
        cfg = _load_config(args)
        trainer = build_trainer(cfg, cfg["run"]["threads"])
        resumed = False
    _warn_nonstandard_dims(cfg)
    out = _prepare_out(cfg)
    history_path = os.path.join(out, "history.txt")
    history_fh = open(history_path, "a" if resumed else "w", encoding="utf-8")

    task = cfg.task
    every = cfg[task]["checkpoint_every"]

    def flush_rows(rows):
        for row in rows:
            history_fh.write(row.format() + "\n")
        history_fh.flush()

    written = len(trainer.history)
    try:
        if task == "pattern":
            while trainer.step_count < trainer.config.max_steps:
                trainer.step()
                flush_rows(trainer.history[written:])
                written = len(trainer.history)
                if every and trainer.step_count % every == 0:
                    _save_trainer_checkpoint(
                        os.path.join(out, f"step_{trainer.step_count:06d}.ckpt"), cfg, trainer
                    )
        else:
            while trainer.epoch < trainer.config.max_epochs:
                trainer.run_epoch()
                flush_rows(trainer.history[written:])
                written = len(trainer.history)
                if every and trainer.epoch % every == 0:
                    _save_trainer_checkpoint(
                        os.path.join(out, f"epoch_{trainer.epoch:04d}.ckpt"), cfg, trainer
                    )
                if trainer.epoch - trainer.best_epoch >= trainer.config.early_stop_patience:
                    break
    finally:
        history_fh.close()

    _save_trainer_checkpoint(os.path.join(out, "final.ckpt"), cfg, trainer)
    _save_trainer_checkpoint(os.path.join(out, "best.ckpt"), cfg, trainer, best=True)
    print(f"trained {cfg.task}: history and checkpoints under {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _metric_lines_pattern(cfg, trainer, t_values):
    target = trainer.target
    sigma = trainer.config.sigma
    lines = []
    for t in t_values:
        loss = evaluate_pattern(
            trainer.params, target, sigma, n_states=trainer.config.val_states,
            t=int(t), seed=cfg.seed,
        )
        lines.append(f"pattern_loss {loss:.10e} t={int(t)} states={trainer.config.val_states}")
    return lines


def _metric_lines_autoencode(cfg, trainer, t_values):
    a = cfg["autoencode"]
    datasets = trainer.datasets
    threshold = finetune_threshold(
        datasets.val or datasets.train[:8], trainer.params, trainer.decoder,
        t_eval=int(t_values[0]), sigma=a["sigma"], seed=cfg.seed,
    )
    lines = [f"threshold {threshold:.2f} t={int(t_values[0])}"]
    for t in t_values:
        f1, bce = evaluate_autoencoder(
            datasets.test or datasets.val, trainer.params, trainer.decoder,
            t_eval=int(t), threshold=threshold, sigma=a["sigma"], seed=cfg.seed,
        )
        lines.append(f"f1 {f1:.6f} t={int(t)} threshold={threshold:.2f}")
        lines.append(f"bce {bce:.10e} t={int(t)}")
    return lines


def _metric_lines_simulate(cfg, trainer, t_values):
    s = cfg["simulate"]
    n_eval = min(s["eval_traj"], len(trainer.val_traj))
    lines = []
    for t in t_values:
        t = int(t)
        se_t, cd_t, se_m, cd_m, mses = [], [], [], [], []
        for traj in trainer.val_traj[:n_eval]:
            horizon = min(t, traj.n_frames - 1)
            truth = Trajectory(
                traj.positions[: horizon + 1], traj.velocities[: horizon + 1], traj.charges
            )
            state = state_from_frame(traj.positions[0], traj.velocities[0], trainer.speed_encoder)
            model = dynamic_rollout(trainer.params, state, s["radius"], horizon)
            ct = trajectory_complexity(truth)
            cm = trajectory_complexity(model)
            se_t.append(ct.sample_entropy)
            cd_t.append(ct.correlation_dimension)
            se_m.append(cm.sample_entropy)
            cd_m.append(cm.correlation_dimension)
            mses.append(velocity_mse(model.velocities[1:], truth.velocities[1:]))
        lines.append(f"sample_entropy_truth {np.mean(se_t):.6f} t={t} m=2 r_factor=0.2")
        lines.append(f"sample_entropy_model {np.mean(se_m):.6f} t={t} m=2 r_factor=0.2")
        lines.append(f"correlation_dimension_truth {np.mean(cd_t):.6f} t={t}")
        lines.append(f"correlation_dimension_model {np.mean(cd_m):.6f} t={t}")
        lines.append(f"velocity_mse {np.mean(mses):.10e} t={t}")
    return lines


def cmd_eval(args) -> int:
    cfg, trainer, _ = _restore_trainer(args.checkpoint)
    if args.out is not None:
        cfg.set("run", "out", args.out)
    out = _prepare_out(cfg)
    if args.t:
        t_values = [int(p) for p in str(args.t).split(",") if p]
    elif cfg.task == "pattern":
        t_values = [25, 1025]
    elif cfg.task == "autoencode":
        t_values = [cfg["autoencode"]["t_eval"]]
    else:
        t_values = [cfg["simulate"]["eval_rollout"]]
    if cfg.task == "pattern":
        lines = _metric_lines_pattern(cfg, trainer, t_values)
    elif cfg.task == "autoencode":
        lines = _metric_lines_autoencode(cfg, trainer, t_values)
    else:
        lines = _metric_lines_simulate(cfg, trainer, t_values)
    report = os.path.join(out, "metrics.txt")
    with open(report, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
            print(line)
    return 0


# ---------------------------------------------------------------------------
# rollout


def _parse_damage(spec: str) -> tuple[str, float]:
    try:
        kind, mag = spec.split(":")
        mag = float(mag)
    except ValueError as exc:
        raise UsageError("damage spec must be global:<magnitude> or local:<magnitude>") from exc
    if kind not in ("global", "local"):
        raise UsageError("damage kind must be global or local")
    if mag <= 0:
        raise UsageError("damage magnitude must be positive")
    return kind, mag


def save_rollout_frames(path, frames: np.ndarray, damage_info: str | None = None) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"frames {frames.shape[0]} nodes {frames.shape[1]} dim {frames.shape[2]}\n")
        if damage_info:
            fh.write(damage_info + "\n")
        for t in range(frames.shape[0]):
            fh.write(" ".join(repr(float(v)) for v in frames[t].reshape(-1)) + "\n")


def load_rollout_frames(path) -> tuple[np.ndarray, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        head = fh.readline().split()
        if len(head) != 6 or head[0] != "frames":
            raise ValueError(f"{path}: bad rollout header")
        n_frames, n_nodes, dim = int(head[1]), int(head[3]), int(head[5])
        meta: dict = {}
        pos = fh.tell()
        line = fh.readline()
        if line.startswith("damage"):
            parts = line.split()
            meta = {"kind": parts[1], "magnitude": float(parts[2]), "step": int(parts[4])}
        else:
            fh.seek(pos)
        frames = np.empty((n_frames, n_nodes, dim))
        for t in range(n_frames):
            vals = np.array([float(p) for p in fh.readline().split()])
            frames[t] = vals.reshape(n_nodes, dim)
    return frames, meta


def cmd_rollout(args) -> int:
    cfg, trainer, _ = _restore_trainer(args.checkpoint)
    if args.out is not None:
        cfg.set("run", "out", args.out)
    out = _prepare_out(cfg)
    t = args.t if args.t is not None else 100
    damage_spec = _parse_damage(args.damage) if args.damage else None
    damage_step = args.damage_step
    export = args.export or os.path.join(out, "rollout.txt")

    if cfg.task == "simulate":
        if damage_spec:
            raise UsageError("damage applies to pattern/autoencode rollouts")
        traj = trainer.val_traj[0]
        state = state_from_frame(traj.positions[0], traj.velocities[0], trainer.speed_encoder)
        model = dynamic_rollout(trainer.params, state, cfg["simulate"]["radius"], int(t))
        save_rollout_frames(export, model.positions)
        print(f"wrote {export}")
        return 0

    if cfg.task == "pattern":
        graph = trainer.target.graph
        n, dim = graph.n_nodes, trainer.target.coord_dim
        sigma = trainer.config.sigma
    else:
        graph = (trainer.datasets.test or trainer.datasets.train)[0]
        n, dim = graph.n_nodes, trainer.config.coord_dim
        sigma = trainer.config.sigma
    rng = np.random.default_rng([cfg.seed, 515151])
    state = AutomatonState(
        Tensor(rng.normal(0.0, sigma, size=(n, dim))),
        Tensor(np.ones((n, trainer.config.hidden_dim))),
    )
    frames = [state.X.values.copy()]
    damage_info = None
    for step in range(1, int(t) + 1):
        state = egc_forward(trainer.params, graph, state)
        if damage_spec and step == damage_step:
            kind, mag = damage_spec
            radius = getattr(trainer, "damage_radius", 1.0)
            state = damage_state(state, kind, mag, radius=radius, seed=cfg.seed)
            damage_info = f"damage {kind} {mag} step {step}"
        frames.append(state.X.values.copy())
    save_rollout_frames(export, np.stack(frames), damage_info)
    print(f"wrote {export}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnca",
        description="Equivariant graph neural cellular automata: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="config file (key = value sections)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override run.out output directory")
        p.add_argument("--threads", type=int, help="worker cap for data generation")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file")

    p_gen = sub.add_parser("gen-data", help="generate datasets plus manifest")
    common(p_gen)

    p_train = sub.add_parser("train", help="train a transition rule")
    common(p_train, checkpoint=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--t", help="evaluation step count, comma list for a sweep")

    p_roll = sub.add_parser("rollout", help="export a rollout trajectory")
    common(p_roll, checkpoint=True)
    p_roll.add_argument("--t", type=int, help="number of steps")
    p_roll.add_argument("--damage", help="perturbation spec {global|local}:{magnitude}")
    p_roll.add_argument("--damage-step", type=int, default=24, dest="damage_step")
    p_roll.add_argument("--export", help="output trajectory file")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            if not args.checkpoint:
                raise UsageError("eval needs --checkpoint")
            return cmd_eval(args)
        if args.command == "rollout":
            if not args.checkpoint:
                raise UsageError("rollout needs --checkpoint")
            return cmd_rollout(args)
        raise UsageError(f"unknown command {args.command}")
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_EXIT


if __name__ == "__main__":
    sys.exit(main())

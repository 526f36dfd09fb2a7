"""Two-phase training, evaluation sweeps, the architecture ablation, and all
run-directory bookkeeping (metrics CSVs, checkpoints, content hashes).

Determinism contract: every stochastic choice comes from a Generator derived
from (config seed, stream id, index), so reruns with the same config and
seed write byte-identical CSVs and checkpoints, and resuming reproduces the
run that never stopped. Wall-clock timing is only written when
``timing.enabled`` is set, because real timings would break that contract.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, load_checkpoint, save_checkpoint
from .baselines import ViewBudget, farthest_planner, greedy_entropy_planner, random_planner
from .camera import Projector, ViewPose, grid_azimuths
from .config import ExperimentConfig, projection_azimuths, save_config
from .dataset import Dataset, DatasetRecord
from .nets import ModelConfig, ReconModel, ReconSession, loss_combined, loss_proj, loss_vox
from .planner import (EpisodeTrace, PlannerPolicy, baseline_loss, normal_log_prob,
                      reinforce_loss, sample_view, snap_to_available)
from .rewards import (RewardWeights, combine_rewards, movement_cost, reward_cons,
                      shannon_entropy_per_voxel, voxel_iou, pixel_iou)

METRICS_HEADER = "phase,epoch,split,planner,views,iou,entropy_bits,loss_vox,loss_proj,seconds"
PLANNERS = ("learned", "random", "farthest", "entropy")

# rng stream ids
_S_INIT, _S_EPOCH, _S_PLANNER_INIT, _S_EPISODE, _S_EVAL = 0, 1, 2, 3, 4


class HarnessError(Exception):
    pass


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{float(x):.10g}"


class MetricsWriter:
    """Append-only CSV with the fixed metrics schema."""

    def __init__(self, path, timing_enabled: bool):
        self.path = Path(path)
        self.timing_enabled = timing_enabled
        if not self.path.exists():
            self.path.write_text(METRICS_HEADER + "\n")

    def row(self, phase: str, epoch: int, split: str, planner: str, views: int,
            iou=None, entropy_bits=None, loss_vox=None, loss_proj=None, seconds=0.0):
        secs = seconds if self.timing_enabled else 0.0
        line = ",".join([
            phase, str(epoch), split, planner, str(views),
            _fmt(iou), _fmt(entropy_bits), _fmt(loss_vox), _fmt(loss_proj), _fmt(secs),
        ])
        with open(self.path, "a", newline="\n") as fh:
            fh.write(line + "\n")


def git_blob_sha1(data: bytes) -> str:
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def write_input_hashes(run_dir: Path, paths: list[Path]) -> None:
    lines = []
    for p in sorted(set(str(p) for p in paths)):
        pth = Path(p)
        if pth.exists():
            lines.append(f"{git_blob_sha1(pth.read_bytes())}  {pth}")
    (run_dir / "inputs.sha1").write_text("\n".join(lines) + "\n")


def prepare_run_dir(out_dir, cfg: ExperimentConfig, inputs: list[Path]) -> Path:
    run = Path(out_dir)
    run.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run / "config.txt")
    write_input_hashes(run, inputs + [run / "config.txt"])
    return run


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(
        resolution=cfg.resolution,
        image_size=cfg.image_size,
        in_channels=2,
        enc_channels=cfg.enc_channels,
        dec_channels=cfg.dec_channels,
        kernel=cfg.kernel,
        variant=cfg.variant,
    )


def projector_of(cfg: ExperimentConfig) -> Projector:
    return Projector(
        image_hw=(cfg.image_size, cfg.image_size),
        depth_samples=cfg.depth_samples,
        elevation=cfg.elevation_deg,
        radius=cfg.radius,
    )


def open_dataset(cfg: ExperimentConfig) -> Dataset:
    data = Dataset(cfg.dataset_path)
    if data.resolution != cfg.resolution or data.image_size != cfg.image_size:
        raise HarnessError(
            f"dataset at {cfg.dataset_path} is {data.resolution}^3 / "
            f"{data.image_size}px but the config wants {cfg.resolution}^3 / "
            f"{cfg.image_size}px"
        )
    return data


def save_model(path, model: ReconModel | PlannerPolicy, adam: Adam | None = None,
               meta: dict | None = None) -> None:
    arrays = {name: p.data for name, p in model.named_parameters()}
    if adam is not None:
        arrays.update(adam.state_arrays([n for n, _ in model.named_parameters()]))
    for key, val in (meta or {}).items():
        arrays[f"meta.{key}"] = np.atleast_1d(np.asarray(val, dtype=np.float64))
    save_checkpoint(path, arrays)


def load_model(model: ReconModel | PlannerPolicy, arrays: dict) -> dict:
    """Load parameters in place; returns any ``meta.*`` entries."""
    for name, p in model.named_parameters():
        if name not in arrays:
            raise HarnessError(f"checkpoint is missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise HarnessError(
                f"checkpoint parameter {name} has shape {arrays[name].shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = np.array(arrays[name], dtype=np.float64)
    return {k[len("meta."):]: v for k, v in arrays.items() if k.startswith("meta.")}


def freeze(model: ReconModel) -> None:
    for p in model.parameters():
        p.requires_grad = False


def _truth_batch(records: list[DatasetRecord]) -> np.ndarray:
    return np.stack([r.volume for r in records])


def _mask_batch(records: list[DatasetRecord], azimuths: list[float]) -> list[np.ndarray]:
    return [np.stack([r.silhouettes[r.view_index(az)].astype(np.float64) for r in records])
            for az in azimuths]


# ---------------------------------------------------------------------------
# reconstruction training


def train_recon(cfg: ExperimentConfig, out_dir, resume=None) -> dict:
    """Train the encoder-decoder on random view sequences.

    Per batch, one sequence length is drawn uniformly from 1..seq_len and each
    member gets its own random distinct views; the combined loss is applied to
    the final predicted volume. Keeps both the per-epoch last checkpoint and
    the best-validation checkpoint.
    """
    data = open_dataset(cfg)
    run = prepare_run_dir(
        out_dir, cfg,
        [Path(cfg.dataset_path) / "manifest.txt", Path(cfg.dataset_path) / "records.bin"],
    )
    metrics = MetricsWriter(run / "metrics.csv", cfg.timing_enabled)
    projector = projector_of(cfg)
    proj_az = projection_azimuths(cfg)
    model = ReconModel(model_config(cfg), derive_rng(cfg.seed, _S_INIT))
    adam = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    start_epoch = 1
    best_val = -1.0
    if resume is not None:
        meta = load_model(model, load_checkpoint(resume))
        adam.load_state_arrays([n for n, _ in model.named_parameters()],
                               load_checkpoint(resume))
        start_epoch = int(meta["epoch"][0]) + 1
        best_val = float(meta["best_val"][0])

    spacing = cfg.view_spacing_deg
    n_views = int(round(360.0 / spacing))
    train_ids = list(data.train_ids)
    val_ids = list(data.test_ids)[: cfg.val_shapes]

    for epoch in range(start_epoch, cfg.epochs + 1):
        t_epoch = time.perf_counter()
        rng = derive_rng(cfg.seed, _S_EPOCH, epoch)
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        sum_lv = sum_lp = sum_iou = 0.0
        n_batches = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch_ids = order[b0 : b0 + cfg.batch_size]
            records = [data.load_record(i) for i in batch_ids]
            length = int(rng.integers(1, cfg.seq_len + 1))
            view_seq = [
                rng.choice(n_views, size=length, replace=False) * spacing
                for _ in records
            ]
            state = model.initial_state(len(records))
            vol = None
            for t in range(length):
                imgs = np.stack([r.image(v[t]) for r, v in zip(records, view_seq)])
                vol, _, state = model.step(imgs, state)
            truths = _truth_batch(records)
            lv = loss_vox(vol, truths)
            lp = loss_proj(vol, _mask_batch(records, proj_az), proj_az, projector)
            loss = loss_combined(lv, lp, cfg.lambda_vox, cfg.lambda_proj)
            if not np.isfinite(loss.item()):
                raise HarnessError(
                    f"non-finite loss at epoch {epoch}; last-good checkpoint kept at "
                    f"{run / 'recon_last.ckpt'}"
                )
            ad.backward(loss)
            adam.step()
            adam.zero_grad()
            for i in range(len(records)):
                sum_iou += voxel_iou(vol.data[i], truths[i], cfg.tau)
            sum_lv += lv.item()
            sum_lp += lp.item()
            n_batches += 1
        n_seen = n_batches * 1.0
        metrics.row("recon", epoch, "train", "-", cfg.seq_len,
                    iou=sum_iou / len(order), loss_vox=sum_lv / n_seen,
                    loss_proj=sum_lp / n_seen,
                    seconds=time.perf_counter() - t_epoch)

        val = _validate(cfg, model, data, val_ids, projector, proj_az, epoch)
        metrics.row("recon", epoch, "val", "-", cfg.seq_len, **val)
        save_model(run / "recon_last.ckpt", model, adam,
                   {"epoch": epoch, "best_val": max(best_val, val["iou"])})
        if val["iou"] > best_val:
            best_val = val["iou"]
            save_model(run / "recon_best.ckpt", model, adam,
                       {"epoch": epoch, "best_val": best_val})
    return {"last": run / "recon_last.ckpt", "best": run / "recon_best.ckpt",
            "metrics": run / "metrics.csv"}


def _validate(cfg, model, data, val_ids, projector, proj_az, epoch) -> dict:
    if not val_ids:
        return {"iou": 0.0, "entropy_bits": 0.0, "loss_vox": 0.0, "loss_proj": 0.0}
    rng = derive_rng(cfg.seed, _S_EPOCH, epoch, 1)
    spacing = cfg.view_spacing_deg
    n_views = int(round(360.0 / spacing))
    records = [data.load_record(i) for i in val_ids]
    view_seq = [rng.choice(n_views, size=cfg.seq_len, replace=False) * spacing
                for _ in records]
    with ad.no_grad():
        state = model.initial_state(len(records))
        vol = None
        for t in range(cfg.seq_len):
            imgs = np.stack([r.image(v[t]) for r, v in zip(records, view_seq)])
            vol, _, state = model.step(imgs, state)
        truths = _truth_batch(records)
        lv = loss_vox(vol, truths).item()
        lp = loss_proj(vol, _mask_batch(records, proj_az), proj_az, projector).item()
    iou = float(np.mean([voxel_iou(vol.data[i], truths[i], cfg.tau)
                         for i in range(len(records))]))
    ent = float(np.mean([shannon_entropy_per_voxel(vol.data[i])
                         for i in range(len(records))]))
    return {"iou": iou, "entropy_bits": ent, "loss_vox": lv, "loss_proj": lp}


# ---------------------------------------------------------------------------
# episodes


class _TruthProjections:
    """Per-record cache of ground-truth silhouettes through the projector."""

    def __init__(self, projector: Projector, azimuths: list[float]):
        self.projector = projector
        self.azimuths = azimuths
        self._cache: dict[int, list[np.ndarray]] = {}

    def get(self, record: DatasetRecord) -> list[np.ndarray]:
        if record.shape_id not in self._cache:
            self._cache[record.shape_id] = [
                self.projector.silhouette(record.volume, az) for az in self.azimuths
            ]
        return self._cache[record.shape_id]


def run_episode(cfg: ExperimentConfig, model: ReconModel, record: DatasetRecord,
                planner_name: str, rng: np.random.Generator,
                projector: Projector, truth_projs: _TruthProjections,
                policy: PlannerPolicy | None = None, train_mode: bool = False,
                weights: RewardWeights | None = None) -> tuple[EpisodeTrace, list[dict]]:
    """One active-reconstruction episode driven by the chosen planner.

    Returns the trace (with tensors when ``train_mode``) and a per-step list
    of evaluation measurements (IoU and entropy after each view).
    """
    if weights is None:
        weights = RewardWeights(cfg.lambda_v, cfg.lambda_p, cfg.lambda_m, cfg.tau)
    spacing = cfg.view_spacing_deg
    azimuths = grid_azimuths(spacing)
    proj_az = projection_azimuths(cfg)
    truth = record.volume
    truth_sils = truth_projs.get(record)

    session = ReconSession(model)
    budget = ViewBudget(tuple(float(a) for a in azimuths))
    current = float(azimuths[rng.integers(len(azimuths))])
    budget.visit(current)
    visited_poses = [ViewPose(current, cfg.elevation_deg, cfg.radius)]

    trace = EpisodeTrace()
    stats: list[dict] = []
    prev_vol = np.zeros_like(truth)
    prev_iou = voxel_iou(prev_vol, truth, cfg.tau)
    prev_proj_iou = [
        pixel_iou(projector.silhouette(prev_vol, az), m, cfg.tau)
        for az, m in zip(proj_az, truth_sils)
    ]
    h = policy.initial_state() if policy is not None else None

    for t in range(cfg.episode_len):
        vol_t = session.observe(record.image(current))
        vol_data = vol_t.data
        iou_t = voxel_iou(vol_data, truth, cfg.tau)
        proj_iou_t = [
            pixel_iou(projector.silhouette(vol_data, az), m, cfg.tau)
            for az, m in zip(proj_az, truth_sils)
        ]
        r_cons = iou_t - prev_iou
        r_proj = float(np.mean([a - b for a, b in zip(proj_iou_t, prev_proj_iou)]))
        stats.append({
            "views": t + 1,
            "iou": iou_t,
            "entropy_bits": shannon_entropy_per_voxel(vol_data),
        })

        mean_deg = 0.0
        log_prob = 0.0
        baseline = 0.0
        lp_tensor = bl_tensor = None
        if planner_name == "learned":
            if policy is None:
                raise HarnessError("learned planner requires a policy")
            glimpse = policy.glimpse(session.last_latent, current)
            pstep = policy.step(h, glimpse)
            h = pstep.state
            mean_raw = pstep.mean.item()
            sampled = sample_view(mean_raw, cfg.sigma_deg, rng)
            nxt = snap_to_available(sampled.azimuth, spacing)
            mean_deg = pstep.mean_deg
            log_prob = sampled.log_prob
            baseline = pstep.baseline_value
            if train_mode:
                lp_tensor = normal_log_prob(sampled.raw, pstep.mean, cfg.sigma_deg)
                bl_tensor = pstep.baseline
        elif planner_name == "random":
            nxt = random_planner(budget, rng)
        elif planner_name == "farthest":
            nxt = farthest_planner(budget)
        elif planner_name == "entropy":
            nxt = greedy_entropy_planner(budget, session, record.image)
        else:
            raise HarnessError(f"unknown planner {planner_name!r}")

        pose = ViewPose(nxt, cfg.elevation_deg, cfg.radius)
        c_move = movement_cost(pose, visited_poses)
        breakdown = combine_rewards(r_cons, r_proj, c_move, weights,
                                    cfg.flip_movement_sign)
        trace.add_step(nxt, mean_deg, log_prob, breakdown, baseline,
                       lp_tensor, bl_tensor)

        visited_poses.append(pose)
        if nxt not in budget.visited:  # the learned planner may revisit views
            budget.visit(nxt)
        current = nxt
        prev_iou = iou_t
        prev_proj_iou = proj_iou_t
        prev_vol = vol_data

    trace.finish()
    return trace, stats


# ---------------------------------------------------------------------------
# planner training


def train_planner(cfg: ExperimentConfig, recon_ckpt, out_dir) -> dict:
    """REINFORCE training of the view planner against a frozen reconstruction."""
    data = open_dataset(cfg)
    run = prepare_run_dir(
        out_dir, cfg,
        [Path(cfg.dataset_path) / "manifest.txt", Path(cfg.dataset_path) / "records.bin",
         Path(recon_ckpt)],
    )
    metrics = MetricsWriter(run / "metrics.csv", cfg.timing_enabled)
    projector = projector_of(cfg)
    model = ReconModel(model_config(cfg), derive_rng(cfg.seed, _S_INIT))
    load_model(model, load_checkpoint(recon_ckpt))
    freeze(model)
    policy = PlannerPolicy(model.config.latent_flat, cfg.planner_hidden,
                           cfg.sigma_deg, derive_rng(cfg.seed, _S_PLANNER_INIT))
    adam = Adam(policy.parameters(), lr=cfg.planner_lr, beta1=cfg.beta1,
                beta2=cfg.beta2, eps=cfg.eps)
    weights = RewardWeights(cfg.lambda_v, cfg.lambda_p, cfg.lambda_m, cfg.tau)
    truth_projs = _TruthProjections(projector, projection_azimuths(cfg))

    episodes_csv = run / "episodes.csv"
    episodes_csv.write_text(
        "episode,step,view_deg,mean_deg,log_prob,r_cons,r_proj,c_move,reward,ret,baseline\n"
    )
    progress_csv = run / "planner_progress.csv"
    progress_csv.write_text("update,episodes_done,mean_return,seconds\n")
    train_ids = list(data.train_ids)
    n_updates = cfg.planner_episodes // cfg.planner_batch_episodes
    episode_id = 0
    block_returns: list[float] = []
    t_block = time.perf_counter()
    with open(episodes_csv, "a", newline="\n") as ep_fh:
        for update in range(n_updates):
            for _ in range(cfg.planner_batch_episodes):
                rng = derive_rng(cfg.seed, _S_EPISODE, episode_id)
                record = data.load_record(train_ids[int(rng.integers(len(train_ids)))])
                trace, _ = run_episode(cfg, model, record, "learned", rng, projector,
                                       truth_projs, policy, train_mode=True,
                                       weights=weights)
                if not np.all(np.isfinite(trace.log_probs)):
                    raise HarnessError("non-finite log-probability; planner run aborted")
                scale = 1.0 / cfg.planner_batch_episodes
                ad.backward(ad.mul(ad.add(reinforce_loss(trace), baseline_loss(trace)), scale))
                block_returns.append(trace.returns[0])
                for t in range(len(trace)):
                    r = trace.rewards[t]
                    ep_fh.write(
                        f"{episode_id},{t + 1},{_fmt(trace.views[t])},{_fmt(trace.means[t])},"
                        f"{_fmt(trace.log_probs[t])},{_fmt(r.r_cons)},{_fmt(r.r_proj)},"
                        f"{_fmt(r.c_move)},{_fmt(r.combined)},{_fmt(trace.returns[t])},"
                        f"{_fmt(trace.baselines[t])}\n"
                    )
                episode_id += 1
            adam.step()
            adam.zero_grad()
            if (update + 1) % 10 == 0 or update == n_updates - 1:
                secs = (time.perf_counter() - t_block) if cfg.timing_enabled else 0.0
                with open(progress_csv, "a", newline="\n") as fh:
                    fh.write(f"{update + 1},{episode_id},"
                             f"{_fmt(float(np.mean(block_returns)))},{_fmt(secs)}\n")
                block_returns = []
                t_block = time.perf_counter()
    save_model(run / "planner.ckpt", policy, adam, {"episodes": episode_id})
    return {"planner": run / "planner.ckpt", "metrics": run / "metrics.csv",
            "episodes": episodes_csv, "progress": progress_csv}


# ---------------------------------------------------------------------------
# evaluation and ablation


def evaluate(cfg: ExperimentConfig, recon_ckpt, planner_name: str, out_dir,
             planner_ckpt=None) -> Path:
    """IoU and entropy after each view over the test split, one CSV per planner."""
    if planner_name not in PLANNERS:
        raise HarnessError(
            f"unknown planner {planner_name!r}; expected one of {PLANNERS}"
        )
    data = open_dataset(cfg)
    inputs = [Path(cfg.dataset_path) / "manifest.txt",
              Path(cfg.dataset_path) / "records.bin", Path(recon_ckpt)]
    if planner_ckpt is not None:
        inputs.append(Path(planner_ckpt))
    run = prepare_run_dir(out_dir, cfg, inputs)
    metrics_path = run / f"eval_{planner_name}.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    metrics = MetricsWriter(metrics_path, cfg.timing_enabled)
    projector = projector_of(cfg)
    model = ReconModel(model_config(cfg), derive_rng(cfg.seed, _S_INIT))
    load_model(model, load_checkpoint(recon_ckpt))
    freeze(model)
    policy = None
    if planner_name == "learned":
        if planner_ckpt is None:
            raise HarnessError("the learned planner needs a planner checkpoint")
        policy = PlannerPolicy(model.config.latent_flat, cfg.planner_hidden,
                               cfg.sigma_deg, derive_rng(cfg.seed, _S_PLANNER_INIT))
        load_model(policy, load_checkpoint(planner_ckpt))
    truth_projs = _TruthProjections(projector, projection_azimuths(cfg))
    planner_code = PLANNERS.index(planner_name)

    t0 = time.perf_counter()
    per_views: dict[int, list[dict]] = {v: [] for v in range(1, cfg.episode_len + 1)}
    with ad.no_grad():
        for shape_id in data.test_ids:
            record = data.load_record(shape_id)
            for ep in range(cfg.eval_episodes_per_shape):
                rng = derive_rng(cfg.seed, _S_EVAL, planner_code, shape_id, ep)
                _, stats = run_episode(cfg, model, record, planner_name, rng,
                                       projector, truth_projs, policy)
                for s in stats:
                    per_views[s["views"]].append(s)
    elapsed = time.perf_counter() - t0
    for views in sorted(per_views):
        rows = per_views[views]
        metrics.row("eval", 0, "test", planner_name, views,
                    iou=float(np.mean([s["iou"] for s in rows])),
                    entropy_bits=float(np.mean([s["entropy_bits"] for s in rows])),
                    seconds=elapsed)
    return metrics_path


def ablate(cfg: ExperimentConfig, out_dir) -> Path:
    """Train all four architecture variants under one budget and compare."""
    run = Path(out_dir)
    run.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in ("2E-R-3D", "R2E-3D", "2E-R3D", "R2E-R3D"):
        sub_cfg = replace(cfg, variant=variant)
        sub_dir = run / variant
        out = train_recon(sub_cfg, sub_dir)
        model = ReconModel(model_config(sub_cfg), derive_rng(cfg.seed, _S_INIT))
        load_model(model, load_checkpoint(out["best"]))
        freeze(model)
        data = open_dataset(sub_cfg)
        loss_train = _final_train_loss(out["metrics"])
        iou_train = _mean_iou_random_views(sub_cfg, model, data, data.train_ids[:64])
        iou_test = _mean_iou_random_views(sub_cfg, model, data, data.test_ids)
        rows.append((variant, loss_train, iou_train, iou_test))
    table = run / "ablation.csv"
    with open(table, "w", newline="\n") as fh:
        fh.write("variant,loss_vox,iou_train,iou_test\n")
        for variant, lv, it, ite in rows:
            fh.write(f"{variant},{_fmt(lv)},{_fmt(it)},{_fmt(ite)}\n")
    return table


def _final_train_loss(metrics_path) -> float:
    last = None
    for line in Path(metrics_path).read_text().splitlines()[1:]:
        parts = line.split(",")
        if parts[0] == "recon" and parts[2] == "train":
            last = float(parts[7])
    if last is None:
        raise HarnessError(f"no training rows found in {metrics_path}")
    return last


def _mean_iou_random_views(cfg, model, data, ids) -> float:
    """Mean test-style IoU after seq_len random distinct views."""
    spacing = cfg.view_spacing_deg
    n_views = int(round(360.0 / spacing))
    ious = []
    with ad.no_grad():
        for b0 in range(0, len(ids), cfg.batch_size):
            records = [data.load_record(i) for i in ids[b0 : b0 + cfg.batch_size]]
            rng = derive_rng(cfg.seed, _S_EVAL, 9, b0)
            seqs = [rng.choice(n_views, size=cfg.seq_len, replace=False) * spacing
                    for _ in records]
            state = model.initial_state(len(records))
            vol = None
            for t in range(cfg.seq_len):
                imgs = np.stack([r.image(v[t]) for r, v in zip(records, seqs)])
                vol, _, state = model.step(imgs, state)
            for i, r in enumerate(records):
                ious.append(voxel_iou(vol.data[i], r.volume, cfg.tau))
    return float(np.mean(ious))

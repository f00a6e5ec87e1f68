"""Losses, Adam, and the training schedule distilling supervision into the field.

Each step draws a ray batch (photometric, semantic, instance losses) and,
after the warmup, a pair batch (relationship loss). Batches are prepared
up front as plain arrays, so `step_losses` is a pure function of
(parameters, batch): finite-difference checks re-evaluate it directly.
Gradients flow through every head including the compositing weights.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import kernels
from .dataset import SceneDataset
from .errors import TrainingDivergedError
from .field import RelationField, sigmoid, softplus
from .relation import pair_pixel_sampler, training_pair_to_supervision
from .render import (
    WHITE,
    expected_depth_batch,
    generate_rays,
    inside_bounds,
    ray_points,
    render_frame,
    sample_depths_batch,
)


@dataclass
class TrainConfig:
    steps: int = 3000
    warmup: int = 200  # relation head starts after the geometry settles
    rays_per_batch: int = 1024
    pairs_per_batch: int = 128
    n_samples: int = 64
    lr_grids: float = 0.15
    lr_density: float = 0.15
    lr_fusion: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_rgb: float = 1.0
    lambda_sem: float = 0.1
    lambda_inst: float = 0.1
    lambda_rel: float = 0.5
    lambda_depth: float = 0.0
    instance_margin: float = 1.0
    instance_pair_cap: int = 192
    invert_direction: bool = False
    skip_null_relations: bool = False  # supervise unrelated pairs toward "none" by default
    jitter: bool = True
    seed: int = 0
    psnr_every: int = 250

    def __post_init__(self):
        if not self.steps > self.warmup >= 0:
            raise ValueError("need steps > warmup >= 0")
        if min(self.lr_grids, self.lr_density, self.lr_fusion) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.lambda_rgb, self.lambda_sem, self.lambda_inst, self.lambda_rel) < 0:
            raise ValueError("loss weights must be non-negative")

    def save(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls(**json.load(f))


# -- losses (forward value + gradient wrt prediction) -------------------------


def photometric_loss(rendered: np.ndarray, target: np.ndarray):
    """Mean squared error over batch pixels and channels."""
    if rendered.shape != target.shape:
        raise ValueError("shape mismatch")
    diff = rendered - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cosine_loss(pred: np.ndarray, target: np.ndarray):
    """1 - cos(pred, target) for a single vector pair; zero-norm pred gives
    loss 1 with no gradient."""
    val, grad = cosine_loss_batch(pred[None], target[None])
    return val, grad[0]


def cosine_loss_batch(pred: np.ndarray, target: np.ndarray, eps: float = 1e-12):
    norms = np.linalg.norm(pred, axis=1)
    t_norms = np.linalg.norm(target, axis=1)
    ok = (norms > eps) & (t_norms > eps)
    safe_n = np.where(ok, norms, 1.0)
    p_hat = pred / safe_n[:, None]
    t_hat = target / np.where(ok, t_norms, 1.0)[:, None]
    cos = np.einsum("nc,nc->n", p_hat, t_hat)
    losses = np.where(ok, 1.0 - cos, 1.0)
    # d(1 - p.t/|p||t|)/dp = -(t_hat - cos * p_hat) / |p|
    grad = -(t_hat - cos[:, None] * p_hat) / safe_n[:, None]
    grad[~ok] = 0.0
    return float(np.mean(losses)), grad / pred.shape[0]


def instance_contrastive_loss(emb: np.ndarray, ids: np.ndarray, margin: float = 1.0):
    """Pull same-id embeddings together, push different ids beyond the margin.

    Mean over same-id pairs of ||e_a - e_b||^2 plus mean over different-id
    pairs of max(0, margin - ||e_a - e_b||)^2, each over unordered pairs.
    """
    n = emb.shape[0]
    grad = np.zeros_like(emb)
    if n < 2:
        return 0.0, grad
    diff = emb[:, None, :] - emb[None, :, :]
    dist2 = np.einsum("abc,abc->ab", diff, diff)
    dist = np.sqrt(np.maximum(dist2, 0.0))
    same = ids[:, None] == ids[None, :]
    iu = np.triu_indices(n, k=1)
    same_u = same[iu]
    n_same = int(same_u.sum())
    n_diff = len(same_u) - n_same
    loss = 0.0
    if n_same:
        loss += float(dist2[iu][same_u].sum()) / n_same
        w = same & ~np.eye(n, dtype=bool)
        grad += (2.0 / n_same) * np.einsum("ab,abc->ac", w.astype(float), diff)
    if n_diff:
        viol = np.maximum(0.0, margin - dist)
        loss += float((viol[iu][~same_u] ** 2).sum()) / n_diff
        safe = np.where(dist > 1e-12, dist, 1.0)
        coef = np.where(~same & (viol > 0) & (dist > 1e-12), -2.0 * viol / safe, 0.0)
        grad += (1.0 / n_diff) * np.einsum("ab,abc->ac", coef, diff)
    return loss, grad


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Classic Adam with bias correction over the field's parameter list."""

    def __init__(self, field: RelationField, config: TrainConfig):
        self.field = field
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v, _ in field.parameters()}
        self.v = {name: np.zeros_like(v) for name, v, _ in field.parameters()}

    def lr_for(self, name: str) -> float:
        if name == "density":
            return self.config.lr_density
        if name.startswith("fusion"):
            return self.config.lr_fusion
        return self.config.lr_grids

    def step(self) -> None:
        self.t += 1
        c = self.config
        for name, values, grad in self.field.parameters():
            adam_step(values, grad, self.m[name], self.v[name], self.t,
                      self.lr_for(name), c.beta1, c.beta2, c.eps)


def adam_step(params, grads, m, v, t, lr, beta1, beta2, eps) -> None:
    """One in-place Adam update with bias-corrected moments."""
    kernels.adam_step(
        params.reshape(-1), np.ascontiguousarray(grads, dtype=np.float64).reshape(-1),
        m.reshape(-1), v.reshape(-1), t, lr, beta1, beta2, eps,
    )


# -- batches -------------------------------------------------------------------


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    depths: np.ndarray  # (R,K) frozen (jitter applied at prepare time)
    deltas: np.ndarray
    rgb_target: np.ndarray
    sem_target: np.ndarray
    inst_ids: np.ndarray
    inst_rows: np.ndarray  # row indices participating in the contrastive loss


@dataclass
class PairBatch:
    origins: np.ndarray
    dirs: np.ndarray
    z: np.ndarray  # (P,3) frozen query points (expected depth is not differentiated)
    targets: np.ndarray
    depths: np.ndarray
    deltas: np.ndarray
    n_skipped: int


def prepare_ray_batch(ds: SceneDataset, config: TrainConfig, rng: np.random.Generator) -> RayBatch:
    train_ids = ds.train_ids
    r = config.rays_per_batch
    img_idx = rng.integers(len(train_ids), size=r)
    cams = {i: ds.camera(tid) for i, tid in enumerate(train_ids)}
    first = cams[0]
    u = rng.integers(first.width, size=r)
    v = rng.integers(first.height, size=r)
    origins = np.empty((r, 3))
    dirs = np.empty((r, 3))
    rgb_t = np.empty((r, 3))
    sem_t = np.empty((r, ds.table.dim))
    ids = np.empty(r, dtype=np.int64)
    for i in np.unique(img_idx):
        sel = img_idx == i
        rec = ds.images[train_ids[i]]
        o, d = generate_rays(cams[int(i)], np.stack([u[sel], v[sel]], axis=1))
        origins[sel], dirs[sel] = o, d
        rgb_t[sel] = rec.rgb[v[sel], u[sel]]
        sem_t[sel] = rec.semfeat[v[sel], u[sel]]
        ids[sel] = rec.segmap[v[sel], u[sel]]
    depths, deltas = sample_depths_batch(
        first.near, first.far, r, config.n_samples, config.jitter, rng
    )
    annotated = np.nonzero(ids > 0)[0]
    if len(annotated) > config.instance_pair_cap:
        annotated = annotated[
            rng.choice(len(annotated), size=config.instance_pair_cap, replace=False)
        ]
        annotated.sort()
    return RayBatch(origins, dirs, depths, deltas, rgb_t, sem_t, ids, annotated)


def prepare_pair_batch(
    ds: SceneDataset, field: RelationField, config: TrainConfig, rng: np.random.Generator
) -> PairBatch | None:
    """Vectorized equivalent of training_pair_to_supervision over a sampled batch:
    one shared density pass estimates every pair's query depth."""
    pairs = pair_pixel_sampler(ds, config.pairs_per_batch, rng)
    ray_px, query_px, targets, cams = [], [], [], []
    skipped = 0
    for pair in pairs:
        rp, qp = pair.ray_pixel, pair.query_pixel
        id_r, id_q = pair.id_ray, pair.id_query
        if config.invert_direction:
            rp, qp = qp, rp
            id_r, id_q = id_q, id_r
        target = ds.store.lookup(pair.image_id, id_q, id_r)
        if target is None:  # self-pair
            skipped += 1
            continue
        if config.skip_null_relations and not ds.store.has_relation(pair.image_id, id_q, id_r):
            skipped += 1
            continue
        ray_px.append(rp)
        query_px.append(qp)
        targets.append(target)
        cams.append(ds.camera(pair.image_id))
    if not ray_px:
        return None
    n = len(ray_px)
    ray_o = np.empty((n, 3))
    ray_d = np.empty((n, 3))
    q_o = np.empty((n, 3))
    q_d = np.empty((n, 3))
    for i in range(n):
        o, d = generate_rays(cams[i], np.array([ray_px[i], query_px[i]], dtype=np.float64))
        ray_o[i], ray_d[i] = o[0], d[0]
        q_o[i], q_d[i] = o[1], d[1]
    cam = cams[0]
    q_depths, q_deltas = sample_depths_batch(cam.near, cam.far, n, config.n_samples)
    pts = ray_points(q_o, q_d, q_depths).reshape(-1, 3)
    inside = inside_bounds(field, pts)
    raw = np.zeros(pts.shape[0])
    if inside.any():
        raw[inside] = field.grids["density"].sample(pts[inside])[:, 0]
    sigma = np.where(inside, softplus(raw), 0.0).reshape(n, config.n_samples)
    weights, _ = kernels.composite_forward(sigma, q_deltas)
    z_depth, hit = expected_depth_batch(weights, q_depths)
    keep = np.nonzero(hit)[0]
    skipped += n - len(keep)
    if len(keep) == 0:
        return None
    z = q_o[keep] + z_depth[keep, None] * q_d[keep]
    depths, deltas = sample_depths_batch(
        cam.near, cam.far, len(keep), config.n_samples, config.jitter, rng
    )
    return PairBatch(
        origins=ray_o[keep],
        dirs=ray_d[keep],
        z=z,
        targets=np.stack(targets)[keep],
        depths=depths,
        deltas=deltas,
        n_skipped=skipped,
    )


# -- the fused forward/backward step -------------------------------------------


def step_losses(
    field: RelationField,
    ray_batch: RayBatch,
    pair_batch: PairBatch | None,
    config: TrainConfig,
    accumulate_grads: bool = False,
):
    """Evaluate (and optionally backpropagate) every loss term on frozen batches.

    Returns a dict of unweighted loss values plus 'total' with the lambda
    weighting applied.
    """
    losses = {}
    r, k = ray_batch.depths.shape
    pts = ray_points(ray_batch.origins, ray_batch.dirs, ray_batch.depths).reshape(-1, 3)
    inside = inside_bounds(field, pts)
    coords = field.grid_coords(pts[inside])  # one transform shared by all heads
    n_in = coords.shape[0]

    raw_d = np.zeros(pts.shape[0])
    raw_d_in = field.grids["density"].sample_coords(coords)[:, 0]
    raw_d[inside] = raw_d_in
    sigma = np.zeros(pts.shape[0])
    sigma[inside] = softplus(raw_d_in)
    sigma = sigma.reshape(r, k)
    weights, t_res = kernels.composite_forward(sigma, ray_batch.deltas)

    sig_c_in = sigmoid(field.grids["color"].sample_coords(coords))
    color = np.zeros((pts.shape[0], 3))
    color[inside] = sig_c_in
    color = color.reshape(r, k, 3)
    rgb_hat = np.einsum("rk,rkc->rc", weights, color) + t_res[:, None] * WHITE[None, :]
    losses["rgb"], d_rgb = photometric_loss(rgb_hat, ray_batch.rgb_target)

    sem = np.zeros((pts.shape[0], field.config.d_semantic))
    sem[inside] = field.grids["semantic"].sample_coords(coords)
    sem = sem.reshape(r, k, -1)
    sem_hat = np.einsum("rk,rkc->rc", weights, sem)
    losses["sem"], d_sem = cosine_loss_batch(sem_hat, ray_batch.sem_target)

    inst = np.zeros((pts.shape[0], field.config.d_instance))
    inst[inside] = field.grids["instance"].sample_coords(coords)
    inst = inst.reshape(r, k, -1)
    inst_hat = np.einsum("rk,rkc->rc", weights, inst)
    rows = ray_batch.inst_rows
    if len(rows) >= 2:
        losses["inst"], d_inst_rows = instance_contrastive_loss(
            inst_hat[rows], ray_batch.inst_ids[rows], config.instance_margin
        )
    else:
        losses["inst"], d_inst_rows = 0.0, None

    # pair branch
    rel_data = None
    if pair_batch is not None:
        p, kk = pair_batch.depths.shape
        p_pts = ray_points(pair_batch.origins, pair_batch.dirs, pair_batch.depths).reshape(-1, 3)
        p_inside = inside_bounds(field, p_pts)
        p_coords = field.grid_coords(p_pts[p_inside])
        p_raw_in = field.grids["density"].sample_coords(p_coords)[:, 0]
        p_sigma = np.zeros(p_pts.shape[0])
        p_sigma[p_inside] = softplus(p_raw_in)
        p_sigma = p_sigma.reshape(p, kk)
        p_weights, p_tres = kernels.composite_forward(p_sigma, pair_batch.deltas)
        z_rep = np.repeat(pair_batch.z, kk, axis=0)
        feats = np.zeros((p_pts.shape[0], field.config.d_relation))
        cache = None
        if p_inside.any():
            feats[p_inside], cache = field.relation_forward(
                p_pts[p_inside], z_rep[p_inside], with_cache=True
            )
        feats3 = feats.reshape(p, kk, -1)
        r_hat = np.einsum("pk,pkc->pc", p_weights, feats3)
        losses["rel"], d_rel = cosine_loss_batch(r_hat, pair_batch.targets)
        rel_data = (p_coords, p_inside, p_raw_in, p_weights, p_tres, feats3, d_rel, cache, p)
    else:
        losses["rel"] = 0.0

    losses["total"] = (
        config.lambda_rgb * losses["rgb"]
        + config.lambda_sem * losses["sem"]
        + config.lambda_inst * losses["inst"]
        + config.lambda_rel * losses["rel"]
    )

    if not accumulate_grads:
        return losses

    # -- backward ---------------------------------------------------------
    g_weights = np.zeros_like(weights)
    g_tres = np.zeros(r)
    inside3 = inside.reshape(r, k)

    d_rgb = config.lambda_rgb * d_rgb
    g_weights += np.einsum("rc,rkc->rk", d_rgb, color)
    g_tres += d_rgb @ WHITE
    d_color = (weights[:, :, None] * d_rgb[:, None, :]).reshape(-1, 3)[inside]
    field.grids["color"].backward_coords(coords, d_color * (sig_c_in * (1.0 - sig_c_in)))

    d_sem = config.lambda_sem * d_sem
    g_weights += np.einsum("rc,rkc->rk", d_sem, sem)
    field.grids["semantic"].backward_coords(
        coords, (weights[:, :, None] * d_sem[:, None, :]).reshape(-1, field.config.d_semantic)[inside]
    )

    if d_inst_rows is not None:
        d_inst = np.zeros_like(inst_hat)
        d_inst[rows] = config.lambda_inst * d_inst_rows
        g_weights += np.einsum("rc,rkc->rk", d_inst, inst)
        field.grids["instance"].backward_coords(
            coords,
            (weights[:, :, None] * d_inst[:, None, :]).reshape(-1, field.config.d_instance)[inside],
        )

    g_sigma = kernels.composite_backward(weights, t_res, ray_batch.deltas, g_weights, g_tres)
    d_raw_d = g_sigma.reshape(-1)[inside] * sigmoid(raw_d_in)
    field.grids["density"].backward_coords(coords, d_raw_d[:, None])

    if rel_data is not None:
        (p_coords, p_inside, p_raw_in, p_weights, p_tres, feats3, d_rel, cache, p) = rel_data
        d_rel = config.lambda_rel * d_rel
        pg_weights = np.einsum("pc,pkc->pk", d_rel, feats3)
        d_feats = (p_weights[:, :, None] * d_rel[:, None, :]).reshape(-1, field.config.d_relation)
        if cache is not None:
            field.relation_backward(cache, d_feats[p_inside])
        pg_sigma = kernels.composite_backward(
            p_weights, p_tres, pair_batch.deltas, pg_weights, np.zeros(p)
        )
        field.grids["density"].backward_coords(
            p_coords, (pg_sigma.reshape(-1)[p_inside] * sigmoid(p_raw_in))[:, None]
        )

    return losses


# -- the loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    field: RelationField
    metrics: list[dict] = dc_field(default_factory=list)
    skipped_pairs: int = 0

    def save_metrics_csv(self, path) -> None:
        cols = ["step", "rgb", "sem", "inst", "rel", "total", "psnr"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for row in self.metrics:
                w.writerow({c: row.get(c, "") for c in cols})


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


def train(
    ds: SceneDataset,
    config: TrainConfig,
    field: RelationField | None = None,
    log=None,
) -> TrainResult:
    """Run the full schedule; raises TrainingDivergedError on non-finite loss."""
    from .field import GridConfig

    if field is None:
        field = RelationField(default_grid_config(ds), seed=config.seed)
    ss = np.random.SeedSequence(config.seed)
    ray_ss, pair_ss = ss.spawn(2)
    rng_rays = np.random.default_rng(ray_ss)
    rng_pairs = np.random.default_rng(pair_ss)
    opt = Adam(field, config)
    result = TrainResult(field=field)
    probe_id = (ds.val_ids or ds.train_ids)[0]
    probe_cam = ds.camera(probe_id)
    probe_rgb = ds.images[probe_id].rgb
    for step in range(config.steps):
        field.zero_grad()
        ray_batch = prepare_ray_batch(ds, config, rng_rays)
        pair_batch = None
        if step >= config.warmup and config.lambda_rel > 0:
            pair_batch = prepare_pair_batch(ds, field, config, rng_pairs)
            if pair_batch is not None:
                result.skipped_pairs += pair_batch.n_skipped
        losses = step_losses(field, ray_batch, pair_batch, config, accumulate_grads=True)
        if not np.isfinite(losses["total"]):
            terms = ", ".join(f"{k}={v:.6g}" for k, v in losses.items())
            raise TrainingDivergedError(f"non-finite loss at step {step}: {terms}")
        opt.step()
        row = {"step": step, **{k: losses[k] for k in ("rgb", "sem", "inst", "rel", "total")}}
        if config.psnr_every and (step + 1) % config.psnr_every == 0:
            rendered = render_frame(field, probe_cam, heads=("color",), n_samples=config.n_samples)
            row["psnr"] = psnr(rendered["color"], probe_rgb)
            if log:
                log(f"step {step + 1}/{config.steps} total={losses['total']:.4f} psnr={row['psnr']:.2f}")
        result.metrics.append(row)
    return result


def default_grid_config(ds: SceneDataset):
    from .field import GridConfig

    if ds.scene is not None:
        lo, hi = tuple(ds.scene.bounds_lo), tuple(ds.scene.bounds_hi)
    else:
        lo, hi = (-2.0, -2.0, -0.5), (2.0, 2.0, 2.5)
    extent = np.asarray(hi) - np.asarray(lo)
    res = tuple(int(x) for x in np.maximum(8, np.round(extent / extent.max() * 48)))
    return GridConfig(resolution=res, bounds_lo=lo, bounds_hi=hi, d_semantic=ds.table.dim)

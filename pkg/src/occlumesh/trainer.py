"""Two-stage training driver.

Stage one ("pretrain") fits the conditioned field on synthetic scenes with
occlusion-free supervision and jointly trains the covered-region recovery
head. Stage two ("finetune") continues from a stage-one checkpoint on the
occluded renders only: the recovery head is frozen, its predicted covered
maps are computed once per view and cached, and the mask term supervises
accumulated opacity against the clamped union of prediction and visible
mask. Color supervision in stage two is restricted to visible-object rays.

All per-iteration randomness derives from ``(seed, iteration)`` so a
checkpoint round-trip resumes bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .amodal import amodal_target, amodal_union, init_amodal_params, recover_amodal
from .camera import Camera, FeatureMap, pixel_to_ray, sample_training_rays
from .conditioning import (SemanticProvider, encode_reference, fetch_point_features,
                           init_encoder_params, semantic_map)
from .hand import HandPose, forward_kinematics
from .losses import (LossWeights, amodal_mask_weighted_loss, amodal_pretrain_loss,
                     color_loss, eikonal_loss, mask_loss_pretrain,
                     normal_orientation_loss, normal_smoothness_loss, total_loss)
from .renderer import (ConditionedField, make_color_spec, make_geometric_spec,
                       render_rays)
from .synthgen.io import Scene, SceneDataset
from .tensorcore import (AdamState, Tape, Tensor, adam_step, backward,
                         checkpoint_hash, load_checkpoint, no_grad, ops,
                         params_to_tensors, save_checkpoint)

PROFILES = {
    # full-size configuration matching the reference setup
    "paper": dict(hidden=512, geo_layers=8, color_hidden=512, color_layers=4,
                  feature_dim=256, c_dim=256, n_coarse=40, n_fine=40,
                  supervision_views=8, rays_per_view=150, eikonal_box_ratio=1.0),
    # small configuration sized for single-core CPU runs
    "desk": dict(hidden=32, geo_layers=4, color_hidden=64, color_layers=3,
                 feature_dim=16, c_dim=16, n_coarse=16, n_fine=8,
                 supervision_views=1, rays_per_view=96, eikonal_box_ratio=0.125,
                 amodal_every=4, init_sharpness=160.0, sharpness_warmup=3000,
                 grad_clip=10.0),
}


@dataclass
class TrainConfig:
    stage: str = "pretrain"  # or "finetune"
    profile: str = "desk"
    iterations: int = 5000
    seed: int = 0
    lr: float | None = None  # default 1e-3 pretrain / 4e-4 finetune
    lr_floor: float = 5e-5
    rays_per_view: int = 150
    supervision_views: int = 2
    n_coarse: int = 32
    n_fine: int = 32
    hidden: int = 64
    geo_layers: int = 4
    color_hidden: int = 64
    color_layers: int = 3
    feature_dim: int = 32
    c_dim: int = 32
    k_joints: int = 6
    knn_smoothness: int = 16
    init_sharpness: float = 3.33
    sharpness_warmup: int = 0  # iterations to anneal up to learned sharpness
    grad_clip: float = 0.0  # global gradient-norm cap; 0 disables
    eikonal_box_ratio: float = 0.25
    amodal_weight: float = 1.0
    amodal_every: int = 1  # train the recovery head every N-th iteration
    pose_noise_sigma: float = 0.0  # radians, per joint angle
    freeze_amodal: bool | None = None  # resolved per stage
    holdout_view: int | None = None  # excluded from both reference and supervision
    checkpoint_every: int = 1000
    log_every: int = 25
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.lr is None:
            self.lr = 1e-3 if self.stage == "pretrain" else 4e-4
        if self.freeze_amodal is None:
            self.freeze_amodal = self.stage == "finetune"
        if self.stage == "finetune" and not self.freeze_amodal:
            raise ValueError("the covered-region head must stay frozen in finetuning")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.pose_noise_sigma < 0:
            raise ValueError("pose_noise_sigma must be >= 0")

    @staticmethod
    def make(stage: str, profile: str = "desk", **overrides) -> "TrainConfig":
        kw = dict(PROFILES[profile], stage=stage, profile=profile)
        kw.update(overrides)
        return TrainConfig(**kw)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", None)
        cfg = TrainConfig(**d)
        if w is not None:
            cfg.weights = LossWeights(**w)
        return cfg


@dataclass
class Model:
    cfg: TrainConfig
    fld: ConditionedField
    params: dict[str, Tensor]  # every trainable tensor, incl. encoder + head

    @property
    def cond_dim(self) -> int:
        return 3 + 3 * self.cfg.k_joints + self.cfg.c_dim

    @staticmethod
    def init(cfg: TrainConfig, rng: np.random.Generator) -> "Model":
        cond_dim = 3 + 3 * cfg.k_joints + cfg.c_dim
        geo = make_geometric_spec(cond_dim, hidden=cfg.hidden, layers=cfg.geo_layers,
                                  feature_dim=cfg.feature_dim)
        col = make_color_spec(cfg.c_dim, feature_dim=cfg.feature_dim,
                              hidden=cfg.color_hidden, layers=cfg.color_layers)
        fld = ConditionedField.init(geo, col, rng,
                                    init_sharpness=cfg.init_sharpness)
        params = dict(fld.params)
        params.update(init_encoder_params(rng, cfg.c_dim))
        params.update(init_amodal_params(rng, cfg.c_dim))
        fld.params = params
        return Model(cfg=cfg, fld=fld, params=params)

    def trainable_names(self) -> list[str]:
        names = sorted(self.params)
        if self.cfg.freeze_amodal:
            names = [n for n in names if not n.startswith("amodal.")]
        return names

    def replace_params(self, new: dict[str, Tensor]):
        self.params.update(new)
        self.fld.params = self.params


def load_model(ckpt_path, cfg: TrainConfig | None = None):
    """Rebuild a model (and optimizer state, if present) from a checkpoint.

    Returns (model, adam_state, header). ``cfg`` overrides the stored
    config; architecture fields must then agree with the stored weights.
    """
    arrays, header = load_checkpoint(ckpt_path)
    stored = TrainConfig.from_json(header["config"])
    if cfg is None:
        cfg = stored
    params = params_to_tensors({k: v for k, v in arrays.items()
                                if not k.startswith("opt.")})
    cond_dim = 3 + 3 * cfg.k_joints + cfg.c_dim
    geo = make_geometric_spec(cond_dim, hidden=cfg.hidden, layers=cfg.geo_layers,
                              feature_dim=cfg.feature_dim)
    col = make_color_spec(cfg.c_dim, feature_dim=cfg.feature_dim,
                          hidden=cfg.color_hidden, layers=cfg.color_layers)
    fld = ConditionedField(geo, col, params)
    model = Model(cfg=cfg, fld=fld, params=params)
    state = AdamState(step=int(header.get("adam_step", 0)))
    for k, v in arrays.items():
        if k.startswith("opt.m."):
            state.m[k[len("opt.m."):]] = v
        elif k.startswith("opt.v."):
            state.v[k[len("opt.v."):]] = v
    return model, state, header


def cosine_lr(cfg: TrainConfig, iteration: int) -> float:
    """Cosine decay from cfg.lr to cfg.lr_floor over cfg.iterations."""
    t = min(iteration, cfg.iterations) / cfg.iterations
    return cfg.lr_floor + (cfg.lr - cfg.lr_floor) * 0.5 * (1 + np.cos(np.pi * t))


# ----------------------------------------------------------------------
# scene plumbing
# ----------------------------------------------------------------------

def scene_pose(scene: Scene, cfg: TrainConfig):
    """Hand pose for a scene, optionally perturbed by a fixed per-scene
    Gaussian error on each joint angle (a consistent wrong estimate, the
    way an upstream pose estimator would be wrong)."""
    pose = scene.meta.hand_pose
    if cfg.pose_noise_sigma > 0:
        rng = np.random.default_rng([cfg.seed, 0x9E37, scene.meta.seed])
        noisy = pose.angles + rng.normal(0, cfg.pose_noise_sigma, pose.angles.shape)
        pose = HandPose(angles=noisy, root=pose.root)
    return pose


def ray_bounds(scene: Scene, cam: Camera):
    d = float(np.linalg.norm(cam.center - scene.meta.norm_center))
    r = scene.meta.norm_radius
    return max(d - r, 0.05), d + r


@dataclass
class SceneContext:
    """Per-(scene, reference view) rendering context.

    Holds the differentiable feature map of the reference view, the
    semantic map, and the hand joint transforms; ``cond_fn`` is what the
    renderer consumes.
    """
    scene: Scene
    ref_index: int
    cam: Camera
    f_c_map: FeatureMap
    f_s_map: FeatureMap
    jt: object
    k: int = 6

    def cond_fn(self, p):
        return fetch_point_features(self.f_c_map, self.f_s_map, self.cam,
                                    p, self.jt, self.k)


def build_scene_context(model: Model, scene: Scene, ref_index: int,
                        provider: SemanticProvider) -> SceneContext:
    """Encode the reference view (inside the active tape, so encoder
    gradients flow) and assemble the conditioning closure."""
    view = scene.view(ref_index)
    rgb = view.rgb  # (H, W, 3)
    mask = view.mask
    img = np.transpose(rgb * mask[..., None], (2, 0, 1))
    f_c_map = encode_reference(model.params, img)
    f_s_map = semantic_map(provider, {"object_mask": mask,
                                      "part_labels": view.part_labels})
    pose = scene_pose(scene, model.cfg)
    jt = forward_kinematics(scene.meta.skeleton, pose)
    return SceneContext(scene=scene, ref_index=ref_index, cam=view.camera,
                        f_c_map=f_c_map, f_s_map=f_s_map, jt=jt,
                        k=model.cfg.k_joints)


SOFT_SHARPNESS = 3.33  # warmup floor: wide sigmoid band for early geometry


class SceneField:
    """Wraps the trainable field with the scene's coordinate normalization:
    field inputs are (p - center) / radius, so the geometric init sphere
    and the eikonal unit-norm target live in normalized units.

    ``anneal`` in [0, 1] blends the effective sharpness geometrically from
    SOFT_SHARPNESS up to the learned value. A high learned sharpness from
    step one saturates the sigmoid, and a surface lost early can never be
    recovered through its vanishing gradients."""

    def __init__(self, fld: ConditionedField, center: np.ndarray, radius: float,
                 anneal: float = 1.0):
        self.fld = fld
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.anneal = float(anneal)

    def sharpness(self):
        if self.anneal >= 1.0:
            return self.fld.sharpness()
        a = self.anneal
        return ops.exp(self.fld.params["eta"] * a
                       + (1.0 - a) * np.log(SOFT_SHARPNESS))

    def sdf(self, p, feats, with_grad: bool = True):
        p_n = (np.atleast_2d(np.asarray(p, dtype=np.float64)) - self.center) / self.radius
        return self.fld.sdf(p_n, feats, with_grad=with_grad)

    def color(self, feats, dirs, normal, f_sdf):
        return self.fld.color(feats, dirs, normal, f_sdf)


def make_scene_field(model: Model, scene: Scene,
                     iteration: int | None = None) -> SceneField:
    anneal = 1.0
    warmup = model.cfg.sharpness_warmup
    if iteration is not None and warmup > 0:
        anneal = min(1.0, iteration / warmup)
    return SceneField(model.fld, scene.meta.norm_center,
                      scene.meta.norm_radius, anneal=anneal)


def composite_white(out):
    """Blend the rendered color over a white background."""
    return out.color + ops.reshape(1.0 - out.opacity, (-1, 1))


def box_samples(scene: Scene, n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(-1.0, 1.0, (n, 3))
    return scene.meta.norm_center + u * scene.meta.norm_radius


# ----------------------------------------------------------------------
# training steps
# ----------------------------------------------------------------------

@dataclass
class StepResult:
    report: object  # LossReport
    grads: dict[str, Tensor]


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Scale all gradients by a common factor so the global L2 norm does
    not exceed ``max_norm``. A single oversized step at high sharpness can
    push the surface past recovery; the cap bounds the damage."""
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float(np.sum(np.asarray(getattr(g, "data", g)) ** 2))
                        for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    out = {}
    for k, g in grads.items():
        arr = np.asarray(getattr(g, "data", g)) * scale
        out[k] = Tensor(arr) if isinstance(g, Tensor) else arr
    return out


def _render_supervised(model, sfield, ctx, origins, dirs, z_lo, z_hi, rng):
    return render_rays(sfield, ctx.cond_fn, origins, dirs, z_lo, z_hi,
                       n_coarse=model.cfg.n_coarse, n_fine=model.cfg.n_fine,
                       rng=rng)


def _shared_terms(model, sfield, ctx, out, samples, dirs, scene, rng):
    """Eikonal (render samples + uniform box samples), orientation and
    smoothness terms, common to both stages."""
    cfg = model.cfg
    g_render = ops.reshape(samples.gradients, (-1, 3))
    n_box = int(round(samples.points.shape[0] * samples.points.shape[1]
                      * cfg.eikonal_box_ratio))
    if n_box > 0:
        p_box = box_samples(scene, n_box, rng)
        feats_box = ctx.cond_fn(p_box)
        _, _, g_box = sfield.sdf(p_box, feats_box, with_grad=True)
        g_all = ops.concat([g_render, g_box], axis=0)
    else:
        g_all = g_render
    l_eik = eikonal_loss(g_all)
    l_ori = normal_orientation_loss(out.normal, dirs)
    l_smo = normal_smoothness_loss(out.surface_point, out.normal,
                                   k_nn=cfg.knn_smoothness)
    return l_eik, l_ori, l_smo


def pretrain_step(model: Model, dataset: SceneDataset, iteration: int,
                  provider: SemanticProvider | None = None) -> StepResult:
    """One stage-one step: occluded reference view in, occlusion-free
    supervision out, plus the covered-region head's pixel BCE."""
    cfg = model.cfg
    if cfg.stage != "pretrain":
        raise ValueError("config stage is not 'pretrain'")
    provider = provider or SemanticProvider()
    rng = np.random.default_rng([cfg.seed, iteration])
    scene = dataset.scene(int(rng.integers(len(dataset))))
    views = [j for j in range(scene.n_views) if j != cfg.holdout_view]
    ref_idx = int(rng.choice(views))
    n_sup = min(cfg.supervision_views, len(views))
    sup_idx = rng.choice(views, size=n_sup, replace=False)

    with Tape() as tape:
        ctx = build_scene_context(model, scene, ref_idx, provider)
        sfield = make_scene_field(model, scene, iteration)

        origins, dirs, colors, mvals = [], [], [], []
        for j in sup_idx:
            view = scene.view(int(j))
            cam = view.camera
            z_lo, z_hi = ray_bounds(scene, cam)
            _, o, d, c, mv = sample_training_rays(
                view.mask_full, cam, cfg.rays_per_view, rng, z_lo, z_hi,
                image=view.rgb_free, mask_values=view.mask_full)
            origins.append(o)
            dirs.append(d)
            colors.append(c)
            mvals.append(mv)
        origins = np.concatenate(origins)
        dirs = np.concatenate(dirs)
        colors = np.concatenate(colors)
        mvals = np.concatenate(mvals)
        z_lo_all = np.repeat([ray_bounds(scene, scene.view(int(j)).camera)[0]
                              for j in sup_idx], cfg.rays_per_view)
        z_hi_all = np.repeat([ray_bounds(scene, scene.view(int(j)).camera)[1]
                              for j in sup_idx], cfg.rays_per_view)

        out, samples = _render_supervised(model, sfield, ctx, origins, dirs,
                                          z_lo_all, z_hi_all, rng)
        l_col = color_loss(composite_white(out), colors)
        l_mask = mask_loss_pretrain(out.opacity, mvals)
        l_eik, l_ori, l_smo = _shared_terms(model, sfield, ctx, out, samples,
                                            dirs, scene, rng)

        l_amodal = None
        if iteration % cfg.amodal_every == 0:
            ref_view = scene.view(ref_idx)
            amodal_pred = recover_amodal(model.params, ctx.f_c_map)
            amodal_gt = amodal_target(ref_view.mask_full, ref_view.mask)
            l_amodal = amodal_pretrain_loss(amodal_pred, amodal_gt)

        extras = {"amodal": l_amodal} if l_amodal is not None else None
        total, report = total_loss(l_col, l_eik, l_mask, l_ori, l_smo,
                                   cfg.weights, extras=extras)
        objective = total
        if l_amodal is not None:
            objective = total + cfg.amodal_weight * l_amodal

    names = model.trainable_names()
    grads = backward(tape, params={n: model.params[n] for n in names})
    grads = clip_gradients(grads, cfg.grad_clip)
    return StepResult(report=report, grads=grads)


def frozen_amodal_maps(model: Model, dataset: SceneDataset, cache_dir,
                       ckpt_hash: str) -> dict[tuple[int, int], np.ndarray]:
    """Predicted covered-region maps for every (scene, view), computed once
    with the frozen head and cached on disk keyed by the checkpoint hash."""
    cache = Path(cache_dir) / ckpt_hash[:16]
    cache.mkdir(parents=True, exist_ok=True)
    maps = {}
    for i in range(len(dataset)):
        scene = dataset.scene(i)
        for j in range(scene.n_views):
            path = cache / f"scene{i:03}_v{j:02}.npy"
            if path.exists():
                maps[(i, j)] = np.load(path)
                continue
            view = scene.view(j)
            img = np.transpose(view.rgb * view.mask[..., None], (2, 0, 1))
            with no_grad():
                f_c = encode_reference(model.params, img)
                pred = recover_amodal(model.params, f_c).data
            np.save(path, pred)
            maps[(i, j)] = pred
    return maps


def finetune_step(model: Model, dataset: SceneDataset, iteration: int,
                  amodal_maps: dict, provider: SemanticProvider | None = None
                  ) -> StepResult:
    """One stage-two step on occluded views only.

    The mask term supervises opacity against min(predicted covered map +
    visible mask, 1); color supervision is restricted to rays whose pixel
    shows the object (visible mask == 1).
    """
    cfg = model.cfg
    if cfg.stage != "finetune":
        raise ValueError("config stage is not 'finetune'")
    if dataset.include_free:
        raise ValueError("finetuning must run on a dataset opened with include_free=False")
    provider = provider or SemanticProvider()
    rng = np.random.default_rng([cfg.seed, iteration])
    scene_idx = int(rng.integers(len(dataset)))
    scene = dataset.scene(scene_idx)
    views = [j for j in range(scene.n_views) if j != cfg.holdout_view]
    ref_idx = int(rng.choice(views))
    n_sup = min(cfg.supervision_views, len(views))
    sup_idx = rng.choice(views, size=n_sup, replace=False)

    with Tape() as tape:
        ctx = build_scene_context(model, scene, ref_idx, provider)
        sfield = make_scene_field(model, scene, iteration)

        origins, dirs, colors, unions, visible = [], [], [], [], []
        for j in sup_idx:
            view = scene.view(int(j))
            cam = view.camera
            z_lo, z_hi = ray_bounds(scene, cam)
            mask = view.mask
            union_map = amodal_union(amodal_maps[(scene_idx, int(j))], mask)
            pix, o, d, c, uv = sample_training_rays(
                (union_map > 0.5).astype(np.float64), cam, cfg.rays_per_view,
                rng, z_lo, z_hi, image=view.rgb, mask_values=union_map)
            origins.append(o)
            dirs.append(d)
            colors.append(c)
            unions.append(uv)
            visible.append(mask[pix[:, 1], pix[:, 0]])
        origins = np.concatenate(origins)
        dirs = np.concatenate(dirs)
        colors = np.concatenate(colors)
        unions = np.concatenate(unions)
        visible = np.concatenate(visible)
        z_lo_all = np.repeat([ray_bounds(scene, scene.view(int(j)).camera)[0]
                              for j in sup_idx], cfg.rays_per_view)
        z_hi_all = np.repeat([ray_bounds(scene, scene.view(int(j)).camera)[1]
                              for j in sup_idx], cfg.rays_per_view)

        out, samples = _render_supervised(model, sfield, ctx, origins, dirs,
                                          z_lo_all, z_hi_all, rng)
        sel = np.nonzero(visible > 0.5)[0]
        if sel.size:
            comp = composite_white(out)
            l_col = color_loss(comp[sel], colors[sel])
        else:
            l_col = Tensor(0.0)
        l_mask = amodal_mask_weighted_loss(out.opacity, unions)
        l_eik, l_ori, l_smo = _shared_terms(model, sfield, ctx, out, samples,
                                            dirs, scene, rng)
        total, report = total_loss(l_col, l_eik, l_mask, l_ori, l_smo, cfg.weights)
        objective = total

    names = model.trainable_names()
    grads = backward(tape, params={n: model.params[n] for n in names})
    grads = clip_gradients(grads, cfg.grad_clip)
    return StepResult(report=report, grads=grads)


# ----------------------------------------------------------------------
# driver
# ----------------------------------------------------------------------

def save_model_checkpoint(path, model: Model, state: AdamState, iteration: int):
    arrays = {k: v.data for k, v in model.params.items()}
    for k, m in state.m.items():
        arrays[f"opt.m.{k}"] = m
    for k, v in state.v.items():
        arrays[f"opt.v.{k}"] = v
    header = {"schema": 1, "stage": model.cfg.stage, "iteration": iteration,
              "adam_step": state.step, "config": model.cfg.to_json()}
    save_checkpoint(path, arrays, header)


def run_training(cfg: TrainConfig, data_root, out_dir,
                 init_checkpoint=None, resume_checkpoint=None,
                 progress=None) -> Path:
    """Train for cfg.iterations; returns the final checkpoint path.

    ``init_checkpoint`` seeds finetuning from stage-one weights (fresh
    optimizer); ``resume_checkpoint`` continues the same stage, optimizer
    state included. A loss log (JSONL) and a loss-curve figure are written
    next to the checkpoints.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    include_free = cfg.stage == "pretrain"
    dataset = SceneDataset(data_root, include_free=include_free)

    start_iter = 0
    state = AdamState()
    if resume_checkpoint is not None:
        model, state, header = load_model(resume_checkpoint, cfg)
        start_iter = int(header["iteration"])
    elif cfg.stage == "finetune":
        if init_checkpoint is None:
            raise ValueError("finetuning requires a stage-one checkpoint")
        model, _, _ = load_model(init_checkpoint, cfg)
    else:
        model = Model.init(cfg, np.random.default_rng(cfg.seed))

    amodal_maps = None
    if cfg.stage == "finetune":
        src = resume_checkpoint or init_checkpoint
        amodal_maps = frozen_amodal_maps(model, dataset, out_dir / "covered_maps",
                                         checkpoint_hash(src))

    log_path = out_dir / "losses.jsonl"
    log_f = open(log_path, "a")
    t0 = time.monotonic()
    try:
        for it in range(start_iter, cfg.iterations):
            lr = cosine_lr(cfg, it)
            if cfg.stage == "pretrain":
                res = pretrain_step(model, dataset, it)
            else:
                res = finetune_step(model, dataset, it, amodal_maps)
            names = model.trainable_names()
            new = adam_step({n: model.params[n] for n in names}, res.grads,
                            state, lr)
            model.replace_params(new)

            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                rec = {"iteration": it, "lr": lr,
                       "elapsed_s": round(time.monotonic() - t0, 3)}
                rec.update(res.report.to_json())
                log_f.write(json.dumps(rec) + "\n")
                log_f.flush()
                if progress:
                    progress(it, res.report)
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_model_checkpoint(out_dir / f"ckpt_{it + 1:06}.bin",
                                      model, state, it + 1)
    finally:
        log_f.close()

    final = out_dir / "checkpoint.bin"
    save_model_checkpoint(final, model, state, cfg.iterations)
    try:
        from .figures import plot_loss_curve
        plot_loss_curve(log_path, out_dir / "loss_curve.png")
    except Exception:
        pass  # a missing figure should not invalidate the training run
    return final


# ----------------------------------------------------------------------
# inference helpers
# ----------------------------------------------------------------------

def render_image(model: Model, scene: Scene, ref_index: int, cam: Camera,
                 pixels: np.ndarray | None = None, chunk: int = 512,
                 provider: SemanticProvider | None = None) -> np.ndarray:
    """Render (a subset of) an image from the model, composited over
    white; returns (H, W, 3). ``pixels`` is (m, 2) int (u, v); defaults to
    the full frame."""
    provider = provider or SemanticProvider()
    with no_grad():
        ctx = build_scene_context(model, scene, ref_index, provider)
        sfield = make_scene_field(model, scene)
        H, W = cam.height, cam.width
        if pixels is None:
            vs, us = np.mgrid[0:H, 0:W]
            pixels = np.stack([us.ravel(), vs.ravel()], axis=-1)
        z_lo, z_hi = ray_bounds(scene, cam)
        img = np.ones((H, W, 3))
        for i in range(0, len(pixels), chunk):
            px = pixels[i : i + chunk]
            o, d = pixel_to_ray(cam, px[:, 0].astype(float),
                                px[:, 1].astype(float), z_lo, z_hi)
            out, _ = render_rays(sfield, ctx.cond_fn, o, d, z_lo, z_hi,
                                 n_coarse=model.cfg.n_coarse,
                                 n_fine=model.cfg.n_fine, rng=None)
            img[px[:, 1], px[:, 0]] = composite_white(out).data
    return np.clip(img, 0.0, 1.0)


def field_sdf_fn(model: Model, scene: Scene, ctx: SceneContext):
    """Numpy-in/numpy-out signed distance for mesh extraction."""
    sfield = make_scene_field(model, scene)

    def fn(p):
        with no_grad():
            feats = ctx.cond_fn(p)
            s, _, _ = sfield.sdf(p, feats, with_grad=False)
        return s.data

    return fn


def field_color_fn(model: Model, scene: Scene, ctx: SceneContext):
    """Vertex colors: evaluate the color branch with view direction set to
    the outward normal (looking along -n onto the surface)."""
    sfield = make_scene_field(model, scene)

    def fn(p, normals):
        with no_grad():
            feats = ctx.cond_fn(p)
            s, f_sdf, grad = sfield.sdf(p, feats, with_grad=True)
            rgb = sfield.color(feats, -np.asarray(normals), grad, f_sdf)
        return np.clip(rgb.data, 0.0, 1.0)

    return fn

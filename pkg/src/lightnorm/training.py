"""End-to-end optimization: Adam + cosine-annealed learning rate, frozen
prior, deterministic data stream, and bitwise-round-tripping checkpoints.

One train step: sample a patch batch -> extract prior features (frozen
backbone, cached per distinct patch) -> fuse and project -> restoration
forward -> L1 + 0.25*(1 - MS-SSIM) -> backward -> Adam update at the
scheduled rate. A non-finite loss aborts with a per-term diagnostic dump.
"""

import hashlib
import json
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .archive import load_archive, save_archive
from .data import PatchStream
from .errors import ConfigurationError, NumericalError
from .fusion import batch_triplets
from .network import LightNormalizer, NetworkPlan, count_parameters
from .prior import extract_features, get_extractor, pad_to_multiple
from .quality import LossConfig, loss_terms, psnr, ssim_np, total_loss

CHECKPOINT_FORMAT = "lightnorm-ckpt-1"


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 2e-4
    lr_final: float = 1e-6
    schedule: str = "cosine"
    betas: tuple = (0.9, 0.999)
    batch_size: int = 4
    iterations: int = 400_000
    patch: int = 448
    seed: int = 0
    weight_decay: float = 0.0
    prior_backbone: str = "stub"
    prior_seed: int = 0
    backbone_weights: str | None = None
    val_every: int = 0
    feature_cache_items: int = 512

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr_final > self.lr_init:
            raise ConfigurationError("lr_final must be <= lr_init")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.schedule != "cosine":
            raise ConfigurationError(f"unknown schedule '{self.schedule}'")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(d["betas"])
        return d

    @staticmethod
    def from_dict(d):
        return TrainConfig(**d)


def lr_at(step, cfg):
    """Cosine annealing from lr_init (step 0) to lr_final (step = iterations)."""
    t = min(max(step, 0), cfg.iterations) / cfg.iterations
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * t))


def config_digest(cfg, plan):
    payload = json.dumps({"train": cfg.to_dict(), "plan": plan.to_dict()},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class _FeatureCache:
    """LRU cache of prior triplets keyed by patch bytes (frozen backbone =>
    features are a pure function of the patch)."""

    def __init__(self, max_items):
        self.max_items = max_items
        self._store = OrderedDict()

    def get(self, patch, extractor):
        key = hash(patch.tobytes())
        if key in self._store:
            self._store.move_to_end(key)
            return self._store[key]
        triplet = extract_features(patch, extractor)
        if self.max_items > 0:
            self._store[key] = triplet
            if len(self._store) > self.max_items:
                self._store.popitem(last=False)
        return triplet


@dataclass
class TrainState:
    cfg: TrainConfig
    plan: NetworkPlan
    model: LightNormalizer
    optimizer: torch.optim.Adam
    extractor: object
    step: int = 0
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    feature_cache: _FeatureCache = None
    stream: PatchStream | None = None
    stream_rng_state: dict | None = None

    def __post_init__(self):
        if self.feature_cache is None:
            self.feature_cache = _FeatureCache(self.cfg.feature_cache_items)


def build_state(cfg, plan, extractor=None):
    """Fresh training state; model init is seeded for reproducibility."""
    torch.manual_seed(cfg.seed)
    model = LightNormalizer(plan)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr_init, betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    if extractor is None:
        extractor = get_extractor(cfg.prior_backbone, seed=cfg.prior_seed,
                                  weights_path=cfg.backbone_weights,
                                  embed_dim=plan.embed_dim)
    return TrainState(cfg=cfg, plan=plan, model=model, optimizer=optimizer,
                      extractor=extractor)


def _batch_tensors(state, pairs):
    degraded = torch.from_numpy(
        np.stack([p.degraded.transpose(2, 0, 1) for p in pairs])
    )
    gt = torch.from_numpy(np.stack([p.gt.transpose(2, 0, 1) for p in pairs]))
    triplets = None
    if state.plan.use_prior:
        feats = [state.feature_cache.get(p.degraded, state.extractor) for p in pairs]
        triplets = batch_triplets(feats)
    return degraded, gt, triplets


def train_step(state, pairs):
    """One optimization step on a list of PatchPairs; returns the loss."""
    degraded, gt, triplets = _batch_tensors(state, pairs)
    lr = lr_at(state.step, state.cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.model.train()
    restored = state.model(degraded, triplets)
    loss = total_loss(gt, restored, state.loss_cfg)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at step {state.step}: "
            f"{loss_terms(gt, restored.detach().nan_to_num(), state.loss_cfg)}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss.detach())


##########################################################################
## Validation


def restore_image(state, image):
    """Direct forward on one [H,W,3] image (padded to the stage divisor)."""
    factor = 2 ** (state.plan.stage_count - 1)
    padded = pad_to_multiple(image, factor)
    x = torch.from_numpy(padded.transpose(2, 0, 1).copy())[None]
    triplets = None
    if state.plan.use_prior:
        feats = extract_features(padded, state.extractor)
        triplets = batch_triplets([feats])
    state.model.eval()
    with torch.no_grad():
        out = state.model(x, triplets)[0].numpy().transpose(1, 2, 0)
    return np.clip(out[: image.shape[0], : image.shape[1]], 0.0, 1.0)


def validate(state, pairs):
    """Mean PSNR/SSIM of direct restoration over (degraded, gt) image pairs."""
    scores = []
    for deg, gt in pairs:
        restored = restore_image(state, deg)
        scores.append((psnr(gt, restored), ssim_np(gt, restored)))
    return {
        "psnr": float(np.mean([s[0] for s in scores])),
        "ssim": float(np.mean([s[1] for s in scores])),
    }


##########################################################################
## Checkpoints


def save_checkpoint(state, path):
    """Archive all parameters, Adam moments, counters, config and rng state."""
    arrays = {}
    for name, tensor in state.model.state_dict().items():
        arrays[f"model.{name}"] = tensor.detach().numpy()
    param_names = {id(p): f"model.{n}" for n, p in state.model.named_parameters()}
    for p, slot in state.optimizer.state.items():
        base = param_names[id(p)]
        arrays[f"opt.exp_avg.{base}"] = slot["exp_avg"].numpy()
        arrays[f"opt.exp_avg_sq.{base}"] = slot["exp_avg_sq"].numpy()
        arrays[f"opt.step.{base}"] = slot["step"].numpy()
    arrays["rng.torch"] = torch.get_rng_state().numpy()

    metadata = {
        "format": CHECKPOINT_FORMAT,
        "iteration": str(state.step),
        "config": json.dumps({"train": state.cfg.to_dict(), "plan": state.plan.to_dict()},
                             sort_keys=True),
        "config_hash": config_digest(state.cfg, state.plan),
    }
    if state.stream is not None:
        metadata["stream_rng"] = json.dumps(state.stream.rng.bit_generator.state)
    elif state.stream_rng_state is not None:
        metadata["stream_rng"] = json.dumps(state.stream_rng_state)
    save_archive(path, arrays, metadata)


def load_checkpoint(path, expected_digest=None, extractor=None):
    """Rebuild a TrainState from an archive; refuses on config-hash mismatch."""
    arrays, metadata = load_archive(path)
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a checkpoint (format={metadata.get('format')})")
    snapshot = json.loads(metadata["config"])
    cfg = TrainConfig.from_dict(snapshot["train"])
    plan = NetworkPlan.from_dict(snapshot["plan"])
    digest = config_digest(cfg, plan)
    if digest != metadata.get("config_hash"):
        raise ConfigurationError(f"{path}: config hash does not match its snapshot")
    if expected_digest is not None and digest != expected_digest:
        raise ConfigurationError(
            f"{path}: checkpoint config hash {digest[:12]} does not match the "
            f"requested configuration {expected_digest[:12]}"
        )

    state = build_state(cfg, plan, extractor=extractor)
    model_state = {
        name[len("model."):]: torch.from_numpy(arr)
        for name, arr in arrays.items() if name.startswith("model.")
    }
    state.model.load_state_dict(model_state)

    for group in state.optimizer.param_groups:
        group["lr"] = lr_at(int(metadata["iteration"]), cfg)
    named = dict(state.model.named_parameters())
    for name, p in named.items():
        key = f"model.{name}"
        if f"opt.exp_avg.{key}" in arrays:
            state.optimizer.state[p] = {
                "step": torch.from_numpy(arrays[f"opt.step.{key}"].copy()),
                "exp_avg": torch.from_numpy(arrays[f"opt.exp_avg.{key}"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt.exp_avg_sq.{key}"].copy()),
            }
    torch.set_rng_state(torch.from_numpy(arrays["rng.torch"].copy()))
    state.step = int(metadata["iteration"])
    if "stream_rng" in metadata:
        state.stream_rng_state = json.loads(metadata["stream_rng"])
    return state


##########################################################################
## Fit loop


def fit(state, records, steps=None, val_pairs=None, log_path=None,
        checkpoint_path=None, checkpoint_every=0, log_every=50,
        stream=None, quiet=True):
    """Run training steps with JSONL logging and periodic checkpoints.

    The stream is recreated deterministically from (records, cfg.seed) unless
    one is passed in (e.g. to continue a resumed run mid-stream).
    """
    cfg = state.cfg
    if stream is None:
        stream = PatchStream(records, patch=cfg.patch, seed=cfg.seed)
        if state.stream_rng_state is not None:
            # continue a resumed run exactly where its stream left off
            stream.rng.bit_generator.state = state.stream_rng_state
    state.stream = stream
    target = state.step + steps if steps is not None else cfg.iterations
    log_f = open(log_path, "a") if log_path else None
    history = []
    try:
        while state.step < target:
            loss = train_step(state, stream.next_batch(cfg.batch_size))
            history.append(loss)
            record = {"step": state.step, "loss": loss, "lr": lr_at(state.step - 1, cfg)}
            if val_pairs and cfg.val_every and state.step % cfg.val_every == 0:
                record.update(validate(state, val_pairs))
            if log_f and (state.step % log_every == 0 or state.step == target):
                log_f.write(json.dumps(record) + "\n")
                log_f.flush()
            if not quiet and state.step % log_every == 0:
                print(f"step {state.step}  loss {loss:.5f}")
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if log_f:
            log_f.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return history


def parameter_checksum(module):
    """Order-independent digest of a parameter set (frozen-prior checks).

    Accepts a torch module, a dict of arrays/tensors, or a PriorExtractor.
    """
    if hasattr(module, "_backend"):
        backend = module._backend
        state = backend.proj if hasattr(backend, "proj") else backend.state_dict()
    elif hasattr(module, "state_dict"):
        state = module.state_dict()
    else:
        state = module
    h = hashlib.sha256()
    for name in sorted(state):
        value = state[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().numpy()
        h.update(str(name).encode())
        h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()

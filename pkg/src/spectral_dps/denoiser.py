"""Residual U-Net noise predictor, its training loop, and checkpoint I/O.

Checkpoint container (little-endian)::

    b"SDPSCKPT" | u32 version | u32 header length | JSON header | float32 blobs

The header lists every tensor as ``[name, shape, offset]`` (offset in float32
elements from the start of the blob region) together with the network config,
per-channel normalization, schedule parameters and training state.  A text
manifest ``<checkpoint>.manifest.txt`` mirrors the tensor list.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import DiffusionSchedule, make_schedule
from .io import atomic_write

log = logging.getLogger(__name__)

MAGIC = b"SDPSCKPT"
FORMAT_VERSION = 1
DEFAULT_SCALE = (2.0, 2.0)  # g/ml per model unit, water and calcium


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class NetConfig:
    channels: int = 2
    base_width: int = 32
    levels: int = 3
    time_dim: int = 128
    groups: int = 8


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time = nn.Sequential(nn.Linear(time_dim, c_out), nn.SiLU(), nn.Linear(c_out, c_out))
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """Encoder-decoder with skip connections; time enters every residual block."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2 ** i for i in range(cfg.levels)]
        self.inc = nn.Conv2d(cfg.channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        c_prev = widths[0]
        for w in widths:
            self.down.append(ResBlock(c_prev, w, cfg.time_dim, cfg.groups))
            c_prev = w
        self.mid = ResBlock(widths[-1], widths[-1], cfg.time_dim, cfg.groups)
        self.up = nn.ModuleList()
        c_prev = widths[-1]
        for i, w in enumerate(reversed(widths)):
            c_out = widths[-2 - i] if i < cfg.levels - 1 else widths[0]
            self.up.append(ResBlock(c_prev + w, c_out, cfg.time_dim, cfg.groups))
            c_prev = c_out
        self.out = nn.Sequential(nn.GroupNorm(cfg.groups, widths[0]), nn.SiLU(),
                                 nn.Conv2d(widths[0], cfg.channels, 3, padding=1))
        # zero output layer: an untrained net predicts eps_hat = 0
        nn.init.zeros_(self.out[-1].weight)
        nn.init.zeros_(self.out[-1].bias)

    def forward(self, x, t):
        emb = timestep_embedding(t, self.cfg.time_dim)
        h = self.inc(x)
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = block(h, emb)
            skips.append(h)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up):
            h = block(torch.cat([h, skips[-1 - i]], dim=1), emb)
            if i < len(self.up) - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.out(h)


class TorchScoreModel:
    """ScoreModel adapter: numpy float64 in/out, float32 network inside."""

    def __init__(self, net: DenoiserNet, scale=DEFAULT_SCALE):
        self.net = net.eval()
        self.scale = np.asarray(scale, dtype=np.float64)

    def _inputs(self, x_t, t):
        x = np.asarray(x_t)
        single = x.ndim == 3
        xb = torch.from_numpy(np.ascontiguousarray(x[None] if single else x, dtype=np.float32))
        return xb, torch.full((xb.shape[0],), int(t), dtype=torch.long), single

    def predict(self, x_t, t):
        xb, tb, single = self._inputs(x_t, t)
        with torch.no_grad():
            eps = self.net(xb, tb)
        eps = eps.double().numpy()
        return eps[0] if single else eps

    def predict_vjp(self, x_t, t):
        xb, tb, single = self._inputs(x_t, t)
        xb.requires_grad_(True)
        with torch.enable_grad():
            eps = self.net(xb, tb)

        def vjp(v):
            v = np.asarray(v, dtype=np.float32)
            v = torch.from_numpy(np.ascontiguousarray(v[None] if single else v))
            (g,) = torch.autograd.grad(eps, xb, v)
            g = g.double().numpy()
            return g[0] if single else g

        out = eps.detach().double().numpy()
        return (out[0] if single else out), vjp


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-4
    max_steps: int | None = None
    scale: tuple = DEFAULT_SCALE
    net: NetConfig = field(default_factory=NetConfig)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    losses: list = field(default_factory=list)
    order: list | None = None  # current epoch's permutation, for mid-epoch resume
    position: int = 0


def _batch_loss(net, x0, t, eps, ab):
    # mean over pixels of the squared noise error summed over channels
    a = torch.from_numpy(ab[t].astype(np.float32))[:, None, None, None]
    x_t = torch.sqrt(a) * x0 + torch.sqrt(1 - a) * eps
    pred = net(x_t, torch.from_numpy(t))
    return ((pred - eps) ** 2).sum(dim=1).mean()


def evaluate_loss(net, images, sched, seed=0, batch_size=16, scale=DEFAULT_SCALE):
    """Noise-prediction loss of ``net`` on ``images`` (density units) at random steps."""
    rng = np.random.default_rng(seed)
    data = np.asarray(images, dtype=np.float64) / np.asarray(scale, dtype=np.float64)[None, :, None, None]
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            x0 = data[start:start + batch_size]
            t = rng.integers(1, sched.T + 1, len(x0))
            eps = rng.standard_normal(x0.shape)
            loss = _batch_loss(net, torch.from_numpy(x0.astype(np.float32)), t,
                               torch.from_numpy(eps.astype(np.float32)), sched.alpha_bar)
            total += float(loss) * len(x0)
            count += len(x0)
    return total / count


def train_denoiser(images, sched: DiffusionSchedule, cfg: TrainConfig = TrainConfig(), seed: int = 0,
                   net: DenoiserNet | None = None, optimizer_state: dict | None = None,
                   state: TrainState | None = None, on_step=None):
    """Minimize the noise-prediction loss with Adam.

    ``images`` are density stacks (N, 2, H, W); they are divided by ``cfg.scale``
    before noising.  Passing back ``net``/``optimizer_state``/``state`` from a
    checkpoint resumes the exact data and noise stream.

    ``on_step(state)`` may return True to stop early.  Returns (net, optimizer,
    state); ``state.losses`` is the per-step trace.
    """
    data = np.asarray(images, dtype=np.float64)
    if data.ndim != 4 or data.shape[1] != 2 or len(data) == 0:
        raise ValueError("training data must be a non-empty (N, 2, H, W) stack")
    data = data / np.asarray(cfg.scale, dtype=np.float64)[None, :, None, None]
    data = torch.from_numpy(data.astype(np.float32))

    if net is None:
        torch.manual_seed(seed)
        net = DenoiserNet(cfg.net)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    state = state or TrainState()
    rng = np.random.default_rng(seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state

    n = len(data)
    bs = min(cfg.batch_size, n)
    while state.epoch < cfg.epochs:
        if state.order is None:
            state.order, state.position = rng.permutation(n).tolist(), 0
        order = np.asarray(state.order)
        for start in range(state.position, n - bs + 1, bs):
            idx = order[start:start + bs]
            t = rng.integers(1, sched.T + 1, bs)
            eps = torch.from_numpy(rng.standard_normal((bs, *data.shape[1:])).astype(np.float32))
            loss = _batch_loss(net, data[idx], t, eps, sched.alpha_bar)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss.item()} at step {state.step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.step += 1
            state.position = start + bs
            state.losses.append(loss.item())
            stop = on_step(state) if on_step is not None else False
            if stop or (cfg.max_steps is not None and state.step >= cfg.max_steps):
                state.rng_state = rng.bit_generator.state
                net.eval()
                return net, opt, state
        state.epoch += 1
        state.order = None
    state.rng_state = rng.bit_generator.state
    net.eval()
    return net, opt, state


# -- checkpoints -------------------------------------------------------------

def _tensors(net, opt):
    out = [(f"model/{k}", v.detach().cpu().numpy()) for k, v in net.state_dict().items()]
    if opt is not None:
        sd = opt.state_dict()
        for pid, st in sd["state"].items():
            for key in ("exp_avg", "exp_avg_sq"):
                out.append((f"optim/{pid}/{key}", st[key].cpu().numpy()))
    return out


def save_checkpoint(path, net: DenoiserNet, sched: DiffusionSchedule, scale=DEFAULT_SCALE,
                    opt=None, state: TrainState | None = None, extra: dict | None = None):
    path = Path(path)
    tensors = _tensors(net, opt)
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append([name, list(arr.shape), offset])
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "net": asdict(net.cfg),
        "scale": [float(s) for s in scale],
        "schedule": {"T": sched.T, "beta_1": sched.beta_1, "beta_T": sched.beta_T},
        "tensors": entries,
        "extra": extra or {},
    }
    if opt is not None:
        sd = opt.state_dict()
        header["optim"] = {"param_groups": sd["param_groups"],
                           "steps": {str(k): float(v["step"]) for k, v in sd["state"].items()}}
    if state is not None:
        header["train_state"] = {"step": state.step, "epoch": state.epoch,
                                 "rng_state": state.rng_state, "order": state.order,
                                 "position": state.position}
    head = json.dumps(header).encode()
    payload = MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + b"".join(blobs)
    atomic_write(path, payload)
    manifest = "\n".join(f"{name}\t{'x'.join(map(str, shape)) or 'scalar'}" for name, shape, _ in entries)
    atomic_write(path.with_name(path.name + ".manifest.txt"), manifest + "\n")
    return path


def load_checkpoint(path):
    """Returns (TorchScoreModel, schedule, info) where info holds the raw header,
    the optimizer state dict (or None) and the TrainState."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a denoiser checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    blob = np.frombuffer(raw[16 + hlen:], dtype="<f4")

    def tensor(entry):
        _, shape, off = entry
        size = int(np.prod(shape)) if shape else 1
        return torch.from_numpy(blob[off:off + size].reshape(shape).copy())

    net = DenoiserNet(NetConfig(**header["net"]))
    model_sd = {e[0][len("model/"):]: tensor(e) for e in header["tensors"] if e[0].startswith("model/")}
    net.load_state_dict(model_sd)
    net.eval()
    s = header["schedule"]
    sched = make_schedule(s["T"], s["beta_1"], s["beta_T"])

    opt_sd = None
    if "optim" in header:
        state = {}
        for e in header["tensors"]:
            if e[0].startswith("optim/"):
                _, pid, key = e[0].split("/")
                state.setdefault(int(pid), {})[key] = tensor(e)
        for pid, step in header["optim"]["steps"].items():
            state[int(pid)]["step"] = torch.tensor(step)
        opt_sd = {"state": state, "param_groups": header["optim"]["param_groups"]}
    ts = header.get("train_state")
    train_state = (TrainState(ts["step"], ts["epoch"], ts["rng_state"], order=ts.get("order"),
                              position=ts.get("position", 0)) if ts else None)
    model = TorchScoreModel(net, header["scale"])
    return model, sched, {"header": header, "optimizer": opt_sd, "train_state": train_state}

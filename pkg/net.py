"""
Sequence classifier built from rotation-form SSM layers

Encoder (1 -> p), a stack of blocks (norm -> SSM -> gated GELU -> dropout ->
residual), mean pooling over time and a linear decoder. The SSM layers and
the Hankel regularizer run in numpy and are bridged into torch autograd with
hand-written backward passes.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

import config
from exceptions import ConfigError, NumericalAbort
from hankel import l1_block_penalty, layer_hsvs, reg_value_and_gradient
from lti_core import RotationSSM
from scan import scan_adjoint, scan_sequence

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass
class TrainConfig:
    """
    Model and training hyperparameters

    reg is the global multiplier of the Hankel nuclear norm (0 disables it).
    """
    depth: int = 2
    n: int = 32
    p: int = 32
    num_classes: int = 10
    dropout: float = 0.0
    lr: float = 0.004
    batch_size: int = 50
    epochs: int = 10
    weight_decay: float = 0.01
    reg: float = 0.0
    seed: int = 0
    norm: str = 'layer'
    residual: bool = True
    b_init: str = 'joint'
    reg_kind: str = 'hankel'
    gramian_solver: str = 'block'
    workers: int = 1
    dataset: str = 'synthetic'
    train_size: Optional[int] = None
    eval_size: Optional[int] = None
    seq_len: int = 128

    def __post_init__(self):
        for name in ('depth', 'n', 'p', 'num_classes', 'batch_size', 'workers', 'seq_len'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.n % 2:
            raise ConfigError(f"state dimension n must be even, got {self.n}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0 or self.reg < 0:
            raise ConfigError("weight decay and regularization magnitude must be >= 0")
        if self.norm not in ('layer', 'batch'):
            raise ConfigError(f"norm must be 'layer' or 'batch', got {self.norm}")
        if self.b_init not in ('joint', 'fan'):
            raise ConfigError(f"b_init must be 'joint' or 'fan', got {self.b_init}")
        if self.reg_kind not in ('hankel', 'l1'):
            raise ConfigError(f"reg_kind must be 'hankel' or 'l1', got {self.reg_kind}")
        if self.gramian_solver not in ('block', 'naive'):
            raise ConfigError(f"gramian_solver must be 'block' or 'naive', got {self.gramian_solver}")
        if self.gramian_solver == 'naive' and self.n > 16:
            raise ConfigError("the naive gramian solver is only enabled for n <= 16")
        if self.dataset not in ('synthetic', 'mnist'):
            raise ConfigError(f"dataset must be 'synthetic' or 'mnist', got {self.dataset}")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> 'TrainConfig':
        if name not in config.PRESETS:
            raise ConfigError(f"Unknown preset '{name}'. Options: {', '.join(config.PRESETS)}")
        values = dict(config.PRESETS[name])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> 'TrainConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def _t(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a))


def _layer_params(rho_raw, alpha_raw, B_learn, C, D, padded) -> RotationSSM:
    return RotationSSM(*(_np(t).copy() for t in (rho_raw, alpha_raw, B_learn, C, D, padded)))


class RotationScanFunction(torch.autograd.Function):
    """Rotation-layer sequence map with the reversed-scan adjoint as backward"""

    @staticmethod
    def forward(ctx, u, rho_raw, alpha_raw, B_learn, C, D, padded, workers):
        params = _layer_params(rho_raw, alpha_raw, B_learn, C, D, padded)
        u_tm = _np(u).transpose(1, 0, 2)
        y, states = scan_sequence(params, u_tm, workers, return_states=True)
        ctx.params, ctx.u, ctx.states, ctx.workers = params, u_tm, states, workers
        return _t(y.transpose(1, 0, 2))

    @staticmethod
    def backward(ctx, grad_y):
        g = _np(grad_y).transpose(1, 0, 2)
        grads = scan_adjoint(ctx.params, ctx.u, ctx.states, g, ctx.workers)
        return (_t(grads.d_u.transpose(1, 0, 2)), _t(grads.d_rho_raw), _t(grads.d_alpha_raw),
                _t(grads.d_B), _t(grads.d_C), _t(grads.d_D), None, None)


class HankelRegFunction(torch.autograd.Function):
    """Layer penalty (Hankel nuclear norm or l1 on the A blocks) with analytic gradient"""

    @staticmethod
    def forward(ctx, rho_raw, alpha_raw, B_learn, C, D, padded, kind, solver, workers):
        params = _layer_params(rho_raw, alpha_raw, B_learn, C, D, padded)
        if kind == 'l1':
            value, grad = l1_block_penalty(params)
        else:
            value, grad = reg_value_and_gradient(params, solver=solver, workers=workers)
        ctx.grad = grad
        return torch.tensor(value, dtype=DTYPE)

    @staticmethod
    def backward(ctx, grad_out):
        scale = float(grad_out)
        g = ctx.grad
        return (_t(scale * g.d_rho_raw), _t(scale * g.d_alpha_raw), _t(scale * g.d_B),
                _t(scale * g.d_C), None, None, None, None, None)


class RotationSSMLayer(nn.Module):
    """Learnable rotation-form SSM acting on (batch, L, p) tensors"""
    mode = 'rotation'

    def __init__(self, n: int, p: int, workers: int = 1):
        super().__init__()
        q = n // 2
        self.workers = workers
        self.rho_raw = nn.Parameter(torch.zeros(q, dtype=DTYPE))
        self.alpha_raw = nn.Parameter(torch.zeros(q, dtype=DTYPE))
        self.B_learn = nn.Parameter(torch.zeros(n, p - 1, dtype=DTYPE))
        self.C = nn.Parameter(torch.zeros(p, n, dtype=DTYPE))
        self.D = nn.Parameter(torch.zeros(p, dtype=DTYPE))
        self.register_buffer('padded', torch.zeros(n, dtype=torch.bool))

    def to_params(self) -> RotationSSM:
        return _layer_params(self.rho_raw, self.alpha_raw, self.B_learn, self.C, self.D, self.padded)

    def load_params(self, params: RotationSSM):
        with torch.no_grad():
            self.rho_raw.copy_(_t(params.rho_raw))
            self.alpha_raw.copy_(_t(params.alpha_raw))
            self.B_learn.copy_(_t(params.B_learn))
            self.C.copy_(_t(params.C))
            self.D.copy_(_t(params.D))
            self.padded.copy_(_t(params.padded))

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        return RotationScanFunction.apply(u, self.rho_raw, self.alpha_raw, self.B_learn,
                                          self.C, self.D, self.padded, self.workers)

    def penalty(self, kind: str = 'hankel', solver: str = 'block') -> torch.Tensor:
        return HankelRegFunction.apply(self.rho_raw, self.alpha_raw, self.B_learn, self.C,
                                       self.D, self.padded, kind, solver, self.workers)


class ReducedSSMLayer(nn.Module):
    """Frozen reduced-order layer (dense_real recurrence or diagonal_complex scan)"""

    def __init__(self, reduced, workers: int = 1):
        super().__init__()
        self.mode = reduced.mode
        self.workers = workers
        self.warning = reduced.warning
        if reduced.A is not None:
            self.register_buffer('A', _t(reduced.A))
        if reduced.lam is not None:
            self.register_buffer('lam', _t(reduced.lam))
        self.register_buffer('B', _t(reduced.B))
        self.register_buffer('C', _t(reduced.C))
        self.register_buffer('D', _t(reduced.D))
        self.register_buffer('tail', torch.tensor(reduced.truncated_tail, dtype=DTYPE))
        sigmas = reduced.sigmas if reduced.sigmas is not None else np.zeros(0)
        self.register_buffer('sigmas', _t(np.asarray(sigmas, dtype=float)))

    def to_reduced(self):
        from compress import ReducedSSM
        return ReducedSSM(
            self.mode, _np(self.B), _np(self.C), _np(self.D),
            A=_np(self.A) if hasattr(self, 'A') else None,
            lam=_np(self.lam) if hasattr(self, 'lam') else None,
            truncated_tail=float(self.tail), sigmas=_np(self.sigmas), warning=self.warning,
        )

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        y = self.to_reduced().simulate(_np(u).transpose(1, 0, 2), self.workers)
        return _t(y.transpose(1, 0, 2))


class SequenceBlock(nn.Module):
    """norm -> SSM -> gelu(y) * sigmoid(W gelu(y)) -> dropout -> residual add"""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        if cfg.norm == 'layer':
            self.norm = nn.LayerNorm(cfg.p, dtype=DTYPE)
        else:
            self.norm = nn.BatchNorm1d(cfg.p, dtype=DTYPE)
        self.ssm = RotationSSMLayer(cfg.n, cfg.p, cfg.workers)
        self.gate = nn.Linear(cfg.p, cfg.p, dtype=DTYPE)
        self.dropout = nn.Dropout(cfg.dropout)
        self.residual = cfg.residual

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if isinstance(self.norm, nn.BatchNorm1d):
            z = self.norm(x.transpose(1, 2)).transpose(1, 2)
        else:
            z = self.norm(x)
        g = F.gelu(self.ssm(z))
        out = self.dropout(g * torch.sigmoid(self.gate(g)))
        return x + out if self.residual else out


class SequenceModel(nn.Module):
    """Encoder, stacked SSM blocks, mean pooling and decoder"""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Linear(1, cfg.p, dtype=DTYPE)
        self.blocks = nn.ModuleList([SequenceBlock(cfg) for _ in range(cfg.depth)])
        self.decoder = nn.Linear(cfg.p, cfg.num_classes, dtype=DTYPE)

    def forward(self, x: torch.Tensor, cache: Optional[Dict[str, torch.Tensor]] = None) -> torch.Tensor:
        h = self.encoder(x.unsqueeze(-1))
        for i, block in enumerate(self.blocks):
            h = block(h)
            if not torch.isfinite(h).all():
                raise NumericalAbort(f"Non-finite activation after block {i}")
            if cache is not None:
                cache[f'block{i}'] = h.detach()
        pooled = h.mean(dim=1)
        if cache is not None:
            cache['pooled'] = pooled.detach()
        return self.decoder(pooled)

    def rotation_layers(self) -> List[RotationSSMLayer]:
        return [b.ssm for b in self.blocks if isinstance(b.ssm, RotationSSMLayer)]

    def layer_modes(self) -> List[str]:
        return [b.ssm.mode for b in self.blocks]

    def regularizer(self) -> torch.Tensor:
        total = torch.zeros((), dtype=DTYPE)
        for layer in self.rotation_layers():
            total = total + layer.penalty(self.cfg.reg_kind, self.cfg.gramian_solver)
        return total


@dataclass
class LossBreakdown:
    loss: float
    ce: float
    reg: float


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    ce: float
    reg: float
    eval_acc: float
    wall_time_s: float


def init_model(cfg: TrainConfig, seed: Optional[int] = None) -> SequenceModel:
    """
    Build a model with the reference initialization

    rho_raw ~ N(1.5, 0.25), alpha_raw ~ N(0, 1), B ~ N(0, 1/(n^2 + m^2))
    (or 1/(n + m) with b_init='fan'), C ~ N(0, 1/(n^2 + p^2)), D ~ N(0, 1),
    dense weights ~ N(0, 1) / sqrt(fan_in) and zero biases.
    """
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    model = SequenceModel(cfg)

    def normal_(t: torch.Tensor, mean: float, std: float):
        t.copy_(torch.randn(t.shape, generator=gen, dtype=DTYPE) * std + mean)

    def dense_(linear: nn.Linear):
        normal_(linear.weight, 0.0, 1.0 / math.sqrt(linear.in_features))
        linear.bias.zero_()

    n, p = cfg.n, cfg.p
    b_std = 1.0 / math.sqrt(n * n + p * p) if cfg.b_init == 'joint' else 1.0 / math.sqrt(n + p)
    with torch.no_grad():
        dense_(model.encoder)
        for block in model.blocks:
            ssm = block.ssm
            normal_(ssm.rho_raw, 1.5, 0.25)
            normal_(ssm.alpha_raw, 0.0, 1.0)
            normal_(ssm.B_learn, 0.0, b_std)
            normal_(ssm.C, 0.0, 1.0 / math.sqrt(n * n + p * p))
            normal_(ssm.D, 0.0, 1.0)
            dense_(block.gate)
        dense_(model.decoder)
    return model


def forward(model: SequenceModel, inputs: torch.Tensor, train_mode: bool = False) -> Tuple[torch.Tensor, Dict]:
    """Run the model; returns logits and a cache of per-block activations."""
    model.train(train_mode)
    cache: Dict[str, torch.Tensor] = {}
    logits = model(inputs, cache)
    return logits, cache


def compute_loss(model: SequenceModel, inputs: torch.Tensor, labels: torch.Tensor,
                 cfg: TrainConfig, train_mode: bool = True) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (loss, ce, reg) tensors with loss = ce + reg_magnitude * reg."""
    logits, _ = forward(model, inputs, train_mode)
    ce = F.cross_entropy(logits, labels)
    if cfg.reg > 0:
        reg = model.regularizer()
    else:
        reg = torch.zeros((), dtype=DTYPE)
    loss = ce + cfg.reg * reg
    if not torch.isfinite(loss):
        raise NumericalAbort(f"Non-finite loss (ce={float(ce)}, reg={float(reg)})")
    return loss, ce, reg


def loss_and_grad(model: SequenceModel, batch: Tuple[torch.Tensor, torch.Tensor],
                  cfg: TrainConfig, train_mode: bool = False) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """
    Loss and full gradient for one batch

    Returns:
        Tuple (LossBreakdown, {parameter name: gradient array})
    """
    inputs, labels = batch
    model.zero_grad(set_to_none=True)
    loss, ce, reg = compute_loss(model, inputs, labels, cfg, train_mode)
    loss.backward()
    grads = {name: (_np(p.grad).copy() if p.grad is not None else np.zeros(tuple(p.shape)))
             for name, p in model.named_parameters()}
    return LossBreakdown(float(loss), float(ce), float(reg)), grads


def _decays(name: str) -> bool:
    return (name.startswith('encoder.') or name.startswith('decoder.')
            or '.gate.' in name or name.endswith('.ssm.D'))


def build_optimizer(model: SequenceModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay on encoder, decoder, gates and D only."""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        (decay if _decays(name) else no_decay).append(param)
    return torch.optim.AdamW(
        [{'params': decay, 'weight_decay': cfg.weight_decay},
         {'params': no_decay, 'weight_decay': 0.0}],
        lr=cfg.lr, betas=config.ADAM_BETAS, eps=config.ADAM_EPS,
    )


def current_regularizer(model: SequenceModel) -> float:
    """Hankel nuclear norm of all rotation layers at the current parameters."""
    return float(sum(np.sum(layer_hsvs(layer.to_params())) for layer in model.rotation_layers()))


def _check_stability(model: SequenceModel):
    """Raise NumericalAbort unless every rotation layer is finite with effective |rho| < 1."""
    for i, layer in enumerate(model.rotation_layers()):
        for name, param in layer.named_parameters():
            if not torch.isfinite(param).all():
                raise NumericalAbort(f"Non-finite value in layer {i} parameter {name}")
        rho = np.abs(layer.to_params().rho)
        if rho.size and rho.max() >= 1.0:
            raise NumericalAbort(f"layer {i} lost stability (max |rho| = {rho.max()})")


def train(
    model: SequenceModel,
    dataset,
    cfg: TrainConfig,
    eval_set=None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    on_epoch: Optional[Callable[[int, SequenceModel, EpochMetrics], None]] = None,
    show_progress: bool = False,
    rng: Optional[np.random.Generator] = None,
    first_epoch: int = 1,
) -> Tuple[SequenceModel, List[EpochMetrics]]:
    """
    Train with mini-batch AdamW at a constant learning rate

    Args:
        model: Model to train in place
        dataset: datasets.SequenceDataset with the training split
        cfg: Hyperparameters
        eval_set: Optional evaluation split for the per-epoch accuracy
        optimizer: Existing optimizer (built from cfg when omitted)
        on_epoch: Callback after every epoch
        show_progress: Show a batch progress bar
        rng: Shuffling generator (seeded from cfg when omitted)
        first_epoch: Number of the first epoch run; cfg.epochs more follow from it

    Returns:
        Tuple (model, per-epoch metrics)
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    torch.manual_seed(cfg.seed + first_epoch - 1)
    rng = rng or np.random.default_rng(cfg.seed)
    optimizer = optimizer or build_optimizer(model, cfg)
    metrics: List[EpochMetrics] = []

    last_epoch = first_epoch + cfg.epochs - 1
    for epoch in range(first_epoch, last_epoch + 1):
        start = time.perf_counter()
        order = rng.permutation(len(dataset))
        totals = np.zeros(2)
        batches = range(0, len(dataset), cfg.batch_size)
        for offset in tqdm(batches, desc=f"epoch {epoch}", disable=not show_progress, leave=False):
            inputs, labels = dataset.tensors(order[offset:offset + cfg.batch_size])
            optimizer.zero_grad(set_to_none=True)
            loss, ce, _ = compute_loss(model, inputs, labels, cfg, train_mode=True)
            loss.backward()
            optimizer.step()
            _check_stability(model)
            totals += (float(loss) * len(labels), float(ce) * len(labels))

        eval_acc = evaluate(model, eval_set) if eval_set is not None else float('nan')
        row = EpochMetrics(
            epoch=epoch,
            train_loss=float(totals[0] / len(dataset)),
            ce=float(totals[1] / len(dataset)),
            reg=current_regularizer(model),
            eval_acc=eval_acc,
            wall_time_s=time.perf_counter() - start,
        )
        metrics.append(row)
        logger.info(f"Epoch {epoch}/{last_epoch}: loss={row.train_loss:.4f} ce={row.ce:.4f} "
                    f"R*={row.reg:.4f} acc={row.eval_acc:.4f} ({row.wall_time_s:.1f}s)")
        if on_epoch is not None:
            on_epoch(epoch, model, row)
    return model, metrics


@torch.no_grad()
def predict_logits(model: SequenceModel, inputs: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    return torch.cat([model(inputs[i:i + batch_size]) for i in range(0, inputs.shape[0], batch_size)])


def evaluate(model: SequenceModel, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy with dropout off."""
    if len(dataset) == 0:
        return float('nan')
    inputs, labels = dataset.tensors()
    predictions = predict_logits(model, inputs, batch_size).argmax(dim=1)
    return float((predictions == labels).double().mean())

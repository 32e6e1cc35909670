"""Gradient-inversion attacks: iterative matching (DLG, iDLG) and the
recursive closed-form reconstruction (R-GAP), plus the retry and
stagnation schedules used by the experiments.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .harness import ProtocolError
from .models import forward_loss
from .optim import AdamState, LBFGSState, adam_step, halve_lr, lbfgs_step


class AmbiguityError(RuntimeError):
    def __init__(self, candidates):
        super().__init__(f"label rule ambiguous, candidates: {sorted(candidates)}")
        self.candidates = sorted(candidates)


class InversionError(RuntimeError):
    pass


class UnsolvableError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    max_iterations: int = 300
    loss_threshold: float = 1e-5
    max_restarts: int = 10
    optimizer: str = "lbfgs"  # lbfgs | adam
    schedule: str = "restart"  # restart | stagnation
    stagnation_window: int = 1000
    stagnation_noise_sigma: float = 0.001
    seed: int = 0
    optimize_label: bool = True
    lr: float | None = None  # optimizer default when None

    def __post_init__(self):
        if self.loss_threshold <= 0:
            raise ValueError("loss_threshold must be positive")
        if self.max_restarts < 1:
            raise ValueError("max_restarts must be >= 1")
        if self.stagnation_window < 1:
            raise ValueError("stagnation_window must be >= 1")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("restart", "stagnation"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class AttackResult:
    reconstructed_input: Tensor
    recovered_label: object  # class index or soft distribution
    loss_trace: list
    restarts_used: int
    success: bool
    wall_time: float
    final_loss: float = float("inf")
    diagnostics: dict = field(default_factory=dict)

    def to_json(self, trace_downsample=True):
        trace = self.loss_trace
        if trace_downsample and len(trace) > 10_000:
            trace = trace[::10]
        label = self.recovered_label
        if isinstance(label, np.ndarray):
            label = [float(v) for v in label]
        else:
            label = int(label)
        return {
            "reconstructed_input": ad.tensor_to_ften_b64(self.reconstructed_input),
            "input_shape": list(self.reconstructed_input.shape),
            "recovered_label": label,
            "loss_trace": [float(v) for v in trace],
            "restarts_used": self.restarts_used,
            "success": self.success,
            "final_loss": self.final_loss,
            "wall_time": self.wall_time,
        }


def gradient_match_loss(a, b):
    """Sum over parameters of the squared elementwise gradient difference.

    Differentiable in whichever side carries tape-recorded Tensors.
    """
    if a.keys() != b.keys():
        raise DimensionError(
            f"gradient maps differ: {sorted(a.keys() ^ b.keys())}"
        )
    total = None
    for name in sorted(a):
        ta = a[name] if isinstance(a[name], Tensor) else Tensor(a[name])
        tb = b[name] if isinstance(b[name], Tensor) else Tensor(b[name])
        if ta.shape != tb.shape:
            raise DimensionError(f"{name}: {ta.shape} vs {tb.shape}")
        term = ad.squared_norm(ad.sub(ta, tb))
        total = term if total is None else ad.add(total, term)
    return total


def _final_linear_name(model):
    for layer in reversed(model.layers):
        if layer.kind == "linear":
            return layer.hyperparams["name"]
    raise ProtocolError(f"model {model.id} has no linear output layer")


def idlg_label_recover(capsule, model):
    """Analytic label from final-layer gradient signs.

    Applies both equivalent decision rules (weight-row dot products and the
    sign of the bias gradient) and requires them to agree.
    """
    name = _final_linear_name(model)
    gw = capsule.gradients[f"{name}.w"]
    gb = capsule.gradients[f"{name}.b"]
    bias_rule = [i for i in range(gb.size) if gb[i] < 0]
    if len(bias_rule) != 1:
        raise AmbiguityError(set(bias_rule))
    label = bias_rule[0]
    # Consistency check with the weight-row rule: the chosen row's dot
    # product with every other row must be non-positive. (The converse set
    # can contain extra rows whose gradients underflow to ~0, so the row
    # rule alone does not always single out one candidate.)
    m = gw @ gw[label]
    tol = 1e-12 * max(float(np.abs(m).max()), 1.0)
    row_rule = [i for i in range(m.size) if i != label and m[i] > tol]
    if row_rule:
        raise AmbiguityError({label} | set(row_rule))
    return label


def stagnation_perturb(x_dummy, optimizer_state, sigma, rng):
    """Escape schedule: additive N(0, sigma^2) noise plus lr halving."""
    if sigma > 0:
        x_dummy = x_dummy + rng.normal(0.0, sigma, size=x_dummy.shape)
    halve_lr(optimizer_state)
    return x_dummy, optimizer_state


def _check_model_matches(capsule, model):
    if model.id != capsule.model_id:
        raise ProtocolError(
            f"capsule is for model {capsule.model_id!r}, got {model.id!r}"
        )
    expected = set(model.trainable_params())
    if set(capsule.gradients) != expected:
        raise ProtocolError("capsule gradient keys do not match model parameters")


def _make_closure(capsule, model, fixed_label, optimize_label):
    shape = tuple(capsule.input_shape)
    n_x = int(np.prod(shape))
    n_c = model.num_classes
    names = sorted(model.trainable_params())
    params = model.trainable_params()
    target = capsule.gradients

    def closure(vec):
        with ad.Tape():
            x = Tensor(vec[:n_x].reshape(shape), requires_grad=True)
            wrt = [x]
            if optimize_label:
                ylog = Tensor(vec[n_x:].reshape(1, n_c), requires_grad=True)
                wrt.append(ylog)
                label = ad.softmax(ylog)
            else:
                label = fixed_label
            _, loss = forward_loss(model, x, label)
            grads = ad.grad(loss, [params[k] for k in names], create_graph=True)
            diff = gradient_match_loss(target, dict(zip(names, grads)))
            gs = ad.grad(diff, wrt)
        flat = np.concatenate([g.data.reshape(-1) for g in gs])
        return diff.item(), flat

    return closure, n_x


def _fresh_optimizer(config):
    if config.optimizer == "adam":
        state = AdamState()
        if config.lr is not None:
            state.lr = config.lr
    else:
        state = LBFGSState()
        if config.lr is not None:
            state.lr = config.lr
    return state


def dlg_attack(capsule, model, config, x_init=None, label_init=None):
    """Iterative gradient matching over a dummy input (and soft label).

    ``x_init``/``label_init`` override the seeded random initialization;
    they exist for diagnostics (e.g. starting at the ground truth).
    With ``schedule="restart"`` a failed run is re-initialized up to
    ``max_restarts`` total attempts; with ``schedule="stagnation"`` a single
    run applies noise + lr halving whenever the loss plateaus.
    """
    _check_model_matches(capsule, model)
    start = time.monotonic()
    n_c = model.num_classes
    fixed_label = label_init if not config.optimize_label else None
    if fixed_label is not None and not isinstance(fixed_label, (int, np.integer)):
        raise ValueError("fixed label must be a class index")
    if not config.optimize_label and fixed_label is None:
        raise ValueError("optimize_label=False requires label_init")
    closure, n_x = _make_closure(capsule, model, fixed_label, config.optimize_label)
    shape = tuple(capsule.input_shape)

    def init_vec(attempt):
        rng = np.random.default_rng(config.seed + attempt)
        # Small-scale init keeps the dummy's logits out of softmax
        # saturation, which otherwise strands single-layer targets at a
        # zero-gradient plateau.
        x0 = 0.3 * rng.standard_normal(n_x)
        if x_init is not None and attempt == 0:
            raw = x_init.data if isinstance(x_init, Tensor) else x_init
            x0 = np.asarray(raw, dtype=np.float64).reshape(-1).copy()
        if not config.optimize_label:
            return x0
        y0 = rng.standard_normal(n_c)
        if label_init is not None and attempt == 0:
            if isinstance(label_init, (int, np.integer)):
                y0 = np.full(n_c, -25.0)
                y0[int(label_init)] = 25.0
            else:
                y0 = np.asarray(label_init, dtype=np.float64).reshape(-1).copy()
        return np.concatenate([x0, y0])

    attempts = config.max_restarts if config.schedule == "restart" else 1
    trace = []
    best_loss = float("inf")
    best_vec = None
    restarts_used = 0
    noise_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x57A6]))

    for attempt in range(attempts):
        restarts_used = attempt + 1
        vec = init_vec(attempt)
        state = _fresh_optimizer(config)
        f0, _ = closure(vec)
        trace.append(f0)
        if f0 < best_loss:
            best_loss, best_vec = f0, vec.copy()
        if f0 < config.loss_threshold:
            break
        window_best = f0
        prev_window_best = None
        done = False
        for it in range(config.max_iterations):
            if config.optimizer == "adam":
                # loss is traced at the pre-step point; the step then applies
                f, g = closure(vec)
                eval_vec = vec
                vec = adam_step(state, vec, g)
            else:
                vec, f = lbfgs_step(state, vec, closure)
                eval_vec = vec
            trace.append(f)
            if f < best_loss:
                best_loss, best_vec = f, eval_vec.copy()
            if f < config.loss_threshold:
                done = True
                break
            if config.optimizer == "lbfgs" and state.no_progress:
                if config.schedule == "restart":
                    break
                vec = vec.copy()
                vec[:n_x], state = stagnation_perturb(
                    vec[:n_x], state, config.stagnation_noise_sigma, noise_rng
                )
                state.prev_x = None
                state.history.clear()
                continue
            if config.schedule == "stagnation":
                window_best = min(window_best, f)
                if (it + 1) % config.stagnation_window == 0:
                    if (
                        prev_window_best is not None
                        and window_best >= prev_window_best * 0.99
                    ):
                        vec = vec.copy()
                        vec[:n_x], state = stagnation_perturb(
                            vec[:n_x], state, config.stagnation_noise_sigma, noise_rng
                        )
                        if isinstance(state, LBFGSState):
                            state.prev_x = None
                            state.history.clear()
                    prev_window_best = window_best
                    window_best = float("inf")
        if done:
            break

    x_best = Tensor(best_vec[:n_x].reshape(shape))
    if config.optimize_label:
        ylog = best_vec[n_x:]
        soft = np.exp(ylog - ylog.max())
        soft /= soft.sum()
        label = soft
    else:
        label = int(fixed_label)
    success = best_loss < config.loss_threshold
    return AttackResult(
        reconstructed_input=x_best,
        recovered_label=label,
        loss_trace=trace,
        restarts_used=restarts_used,
        success=success,
        wall_time=time.monotonic() - start,
        final_loss=best_loss,
    )


def idlg_attack(capsule, model, config, x_init=None):
    """DLG with the label fixed analytically instead of optimized."""
    label = idlg_label_recover(capsule, model)
    cfg_kwargs = {**config.__dict__, "optimize_label": False}
    cfg = AttackConfig(**cfg_kwargs)
    result = dlg_attack(capsule, model, cfg, x_init=x_init, label_init=label)
    result.diagnostics["recovered_label_rule"] = int(label)
    return result


# ---------------------------------------------------------------------------
# R-GAP


def solve_outer_product(delta, grad_w):
    """Least-squares x from delta * x^T = grad_w (batch-1 structure)."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    grad_w = np.asarray(grad_w, dtype=np.float64)
    beta = float(delta @ delta)
    if beta == 0.0:
        raise UnsolvableError("zero output gradient: outer-product system is empty")
    return (grad_w.T @ delta) / beta


def _linear_blocks(model):
    """Group layers into solvable blocks walking the stack in order.

    Each block is a linear or conv layer with an optional trailing sigmoid.
    Pure reshapes are folded into the blocks' input/output shapes.
    """
    blocks = []
    with ad.Tape(retain_for_higher_order=False):
        h = Tensor(np.zeros((1,) + model.input_shape))
        current = None
        for i, layer in enumerate(model.layers):
            if layer.kind in ("reshape", "flatten"):
                h = model._apply(layer, h, i)
                continue
            if layer.kind in ("conv", "linear"):
                if current is not None:
                    blocks.append(current)
                in_shape = h.shape[1:]
                h = model._apply(layer, h, i)
                current = {
                    "kind": layer.kind,
                    "spec": layer,
                    "name": layer.hyperparams["name"],
                    "in_shape": in_shape,
                    "out_shape": h.shape[1:],
                    "activation": None,
                }
                continue
            if layer.kind == "activation":
                fn = layer.hyperparams["fn"]
                if fn != "sigmoid":
                    raise InversionError(
                        f"layer {i}: activation {fn!r} is not invertible"
                    )
                if current is None:
                    raise InversionError(f"layer {i}: activation before any weights")
                current["activation"] = "sigmoid"
                h = model._apply(layer, h, i)
                continue
            raise InversionError(f"layer {i}: {layer.kind} unsupported by R-GAP")
        if current is not None:
            blocks.append(current)
    if not blocks or blocks[-1]["kind"] != "linear" or blocks[-1]["activation"]:
        raise InversionError("R-GAP requires a final linear layer producing logits")
    return blocks


def _block_forward_matrix_free(model, block, x_flat):
    """Apply the block's linear map (no bias) to a flat vector."""
    with ad.Tape(retain_for_higher_order=False):
        x = Tensor(x_flat.reshape(block["in_shape"]))
        h = ad.reshape(x, (1,) + block["in_shape"])
        spec = block["spec"]
        hp = spec.hyperparams
        if block["kind"] == "linear":
            out = ad.linear(h, model.params[f"{hp['name']}.w"], None)
        else:
            out = ad.conv2d(
                h,
                model.params[f"{hp['name']}.w"],
                stride=tuple(hp["stride"]),
                pad=tuple(hp["pad"]),
            )
    return out.data.reshape(-1)


def _block_input_grad(model, block, gz_flat):
    """Gradient of sum(gz * block(x)) w.r.t. x: the adjoint of the map."""
    gz = Tensor(gz_flat.reshape((1,) + block["out_shape"]))
    with ad.Tape(retain_for_higher_order=False):
        x = Tensor(np.zeros((1,) + block["in_shape"]), requires_grad=True)
        spec = block["spec"]
        hp = spec.hyperparams
        if block["kind"] == "linear":
            out = ad.linear(x, model.params[f"{hp['name']}.w"], None)
        else:
            out = ad.conv2d(
                x,
                model.params[f"{hp['name']}.w"],
                stride=tuple(hp["stride"]),
                pad=tuple(hp["pad"]),
            )
        s = ad.reduce_sum(ad.mul(out, gz))
        (gx,) = ad.grad(s, [x])
    return gx.data.reshape(-1)


def _conv_sparse_system(model, block, gz):
    """Stacked sparse system for a conv block.

    Rows: the unrolled convolution equations (W x = z - b) followed by the
    kernel-gradient equations (sum over positions of gz * shifted x = gW).
    """
    hp = block["spec"].hyperparams
    k = model.params[f"{hp['name']}.w"].data
    f, c, kh, kw = k.shape
    cin, h, w = block["in_shape"]
    sh, sw = hp["stride"]
    ph, pw = hp["pad"]
    idx, hout, wout = ad._col_indices(c, h, w, kh, kw, sh, sw, ph, pw)
    hp_, wp_ = h + 2 * ph, w + 2 * pw
    # map padded flat index -> input flat index (-1 for pad cells)
    pad_map = -np.ones(c * hp_ * wp_, dtype=np.int64)
    ci, hi, wi = np.meshgrid(
        np.arange(c), np.arange(h), np.arange(w), indexing="ij"
    )
    padded = (ci * hp_ + (hi + ph)) * wp_ + (wi + pw)
    pad_map[padded.reshape(-1)] = np.arange(c * h * w)
    cols_in = pad_map[idx]  # (c*kh*kw, L) entries into x, -1 == zero pad
    q, l = cols_in.shape
    n_in = c * h * w

    rows, cols, vals = [], [], []
    # convolution equations: one row per output element (f, pos)
    k2 = k.reshape(f, q)
    for fi in range(f):
        for qi in range(q):
            valid = cols_in[qi] >= 0
            pos = np.nonzero(valid)[0]
            rows.append(fi * l + pos)
            cols.append(cols_in[qi, pos])
            vals.append(np.full(pos.size, k2[fi, qi]))
    n_conv_rows = f * l
    # kernel-gradient equations: one row per kernel element (f, q)
    gz2 = gz.reshape(f, l)
    for fi in range(f):
        for qi in range(q):
            valid = cols_in[qi] >= 0
            pos = np.nonzero(valid)[0]
            rows.append(np.full(pos.size, n_conv_rows + fi * q + qi))
            cols.append(cols_in[qi, pos])
            vals.append(gz2[fi, pos])
    a = scipy.sparse.coo_matrix(
        (
            np.concatenate(vals),
            (np.concatenate(rows), np.concatenate(cols)),
        ),
        shape=(n_conv_rows + f * q, n_in),
    ).tocsr()
    return a, n_conv_rows


_DENSE_RANK_LIMIT = 4_000_000  # rows*cols budget for exact rank computation


def rgap_reconstruct(capsule, model):
    """Walk the layers last-to-first solving each linear system for its input.

    Returns (reconstructed input Tensor, per-layer rank report). Layers whose
    systems are rank-deficient are flagged and the result marked approximate.
    """
    _check_model_matches(capsule, model)
    blocks = _linear_blocks(model)
    report = []

    # final layer: gz equals the bias gradient (softmax - onehot for batch 1)
    last = blocks[-1]
    gb = capsule.gradients[f"{last['name']}.b"]
    gw = capsule.gradients[f"{last['name']}.w"]
    if np.all(gb == 0):
        raise UnsolvableError(f"layer {last['name']}: zero output gradient")
    label = int(np.argmin(gb))
    x = solve_outer_product(gb, gw)
    report.append(
        {
            "layer": last["name"],
            "kind": "linear",
            "unknowns": x.size,
            "equations": gw.size,
            "rank": x.size,
            "deficient": False,
            "residual": float(np.linalg.norm(np.outer(gb, x) - gw)),
            "method": "closed_form",
        }
    )
    gz_next = gb
    next_block = last

    for block in reversed(blocks[:-1]):
        # invert the activation between this block and the next
        a_out = x.reshape(-1)
        if block["activation"] == "sigmoid":
            eps = 1e-15
            if np.any(a_out <= 0.0) or np.any(a_out >= 1.0):
                raise InversionError(
                    f"layer {block['name']}: sigmoid output outside (0, 1), "
                    "cannot invert"
                )
            a_c = np.clip(a_out, eps, 1 - eps)
            z = np.log(a_c) - np.log1p(-a_c)
            act_deriv = a_c * (1 - a_c)
        else:
            z = a_out
            act_deriv = np.ones_like(a_out)

        ga = _block_input_grad(model, next_block, gz_next)
        gz = ga * act_deriv
        b = model.params[f"{block['name']}.b"].data
        gw = capsule.gradients[f"{block['name']}.w"]
        if block["kind"] == "linear":
            w = model.params[f"{block['name']}.w"].data
            z_rhs = z - b
            beta = float(gz @ gz)
            n_in = w.shape[1]
            if beta > 1e-20 * max(1.0, np.abs(gw).max() ** 2):
                x = (gw.T @ gz) / beta
                residual = float(np.linalg.norm(np.outer(gz, x) - gw))
                consistent = np.linalg.norm(w @ x - z_rhs) <= 1e-6 * max(
                    1.0, np.linalg.norm(z_rhs)
                )
                report.append(
                    {
                        "layer": block["name"],
                        "kind": "linear",
                        "unknowns": n_in,
                        "equations": w.shape[0] + gw.size,
                        "rank": n_in,
                        "deficient": not consistent,
                        "residual": residual,
                        "method": "closed_form",
                    }
                )
            else:
                x, res, rank, _ = np.linalg.lstsq(w, z_rhs, rcond=None)
                report.append(
                    {
                        "layer": block["name"],
                        "kind": "linear",
                        "unknowns": n_in,
                        "equations": w.shape[0],
                        "rank": int(rank),
                        "deficient": int(rank) < n_in,
                        "residual": float(np.sqrt(res.sum())) if res.size else 0.0,
                        "method": "dense_lstsq",
                    }
                )
        else:  # conv
            hp = block["spec"].hyperparams
            z_rhs = (
                z.reshape(block["out_shape"])
                - b[:, None, None]
            ).reshape(-1)
            a, n_conv_rows = _conv_sparse_system(model, block, gz)
            rhs = np.concatenate([z_rhs, gw.reshape(-1)])
            n_in = int(np.prod(block["in_shape"]))
            if a.shape[0] * a.shape[1] <= _DENSE_RANK_LIMIT:
                dense = a.toarray()
                x, res, rank, _ = np.linalg.lstsq(dense, rhs, rcond=None)
                rank = int(rank)
                residual = float(np.linalg.norm(dense @ x - rhs))
                method = "dense_lstsq"
            else:
                sol = scipy.sparse.linalg.lsqr(a, rhs, atol=1e-12, btol=1e-12)
                x, residual = sol[0], float(sol[3])
                rank = None
                method = "sparse_lsqr"
            deficient = (
                (rank is not None and rank < n_in)
                or a.shape[0] < n_in
                or (
                    rank is None
                    and residual > 1e-6 * max(1.0, np.linalg.norm(rhs))
                )
            )
            report.append(
                {
                    "layer": block["name"],
                    "kind": "conv",
                    "unknowns": n_in,
                    "equations": a.shape[0],
                    "rank": rank,
                    "deficient": bool(deficient),
                    "residual": residual,
                    "method": method,
                }
            )
        gz_next = gz
        next_block = block

    x0 = Tensor(x.reshape(model.input_shape))
    approximate = any(r["deficient"] for r in report)
    report.reverse()
    return x0, {"layers": report, "approximate": approximate, "label": label}

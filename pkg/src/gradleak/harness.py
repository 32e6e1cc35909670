"""Collaborative-protocol simulation: participants publish per-sample
gradient capsules; an observer sees capsules and nothing else.

The global model never advances; capsules are pure observations of fixed
weights, exactly the setting the attacks operate in.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import forward_loss


class ProtocolError(RuntimeError):
    pass


class CapsuleParseError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class GradientCapsule:
    model_id: str
    participant_id: str
    epoch: int
    loss_value: float
    input_shape: tuple
    gradients: dict  # parameter name -> np.ndarray

    def __eq__(self, other):
        if not isinstance(other, GradientCapsule):
            return NotImplemented
        return (
            self.model_id == other.model_id
            and self.participant_id == other.participant_id
            and self.epoch == other.epoch
            and self.loss_value == other.loss_value
            and tuple(self.input_shape) == tuple(other.input_shape)
            and self.gradients.keys() == other.gradients.keys()
            and all(
                np.array_equal(v, other.gradients[k])
                for k, v in self.gradients.items()
            )
        )


def compute_shared_gradient(model, x, label, epoch=0, participant_id="p0"):
    """Gradient capsule for one (sample, label) pair at fixed weights.

    Batch size is 1 by construction. Model parameters are not modified.
    """
    if not np.all(np.isfinite(x.data)):
        raise ProtocolError("capsule rejected: non-finite input")
    params = model.trainable_params()
    if not params:
        raise ProtocolError(f"model {model.id} has no trainable parameters")
    names = sorted(params)
    before = {k: params[k].data.copy() for k in names}
    with ad.Tape(retain_for_higher_order=False):
        _, loss = forward_loss(model, x, label)
        grads = ad.grad(loss, [params[k] for k in names])
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise ProtocolError(f"capsule rejected: non-finite loss {loss_value}")
    for k in names:
        assert np.array_equal(params[k].data, before[k])
    return GradientCapsule(
        model_id=model.id,
        participant_id=participant_id,
        epoch=epoch,
        loss_value=loss_value,
        input_shape=tuple(x.shape),
        gradients={k: g.data.copy() for k, g in zip(names, grads)},
    )


@dataclass
class Participant:
    id: str
    model: object
    _dataset: list = field(default_factory=list, repr=False)  # (Tensor, label)

    def emit_capsule(self, epoch):
        x, label = self._dataset[epoch % len(self._dataset)]
        return compute_shared_gradient(
            self.model, x, label, epoch=epoch, participant_id=self.id
        )

    def sample_count(self):
        return len(self._dataset)


def run_round(participants, epoch):
    """One sharing round: one capsule per participant, ordered by id."""
    ids = [p.id for p in participants]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate participant ids")
    model_ids = {p.model.id for p in participants}
    if len(model_ids) > 1:
        raise ProtocolError(f"heterogeneous model ids: {sorted(model_ids)}")
    return [p.emit_capsule(epoch) for p in sorted(participants, key=lambda p: p.id)]


# ---------------------------------------------------------------------------
# serialization

_GCAP_MAGIC = b"GCAP"


def capsule_to_json(capsule):
    return {
        "model_id": capsule.model_id,
        "participant_id": capsule.participant_id,
        "epoch": capsule.epoch,
        "loss": capsule.loss_value,
        "input_shape": list(capsule.input_shape),
        "gradients": {
            k: ad.tensor_to_json(Tensor(v)) for k, v in sorted(capsule.gradients.items())
        },
    }


def capsule_from_json(obj):
    try:
        return GradientCapsule(
            model_id=obj["model_id"],
            participant_id=obj["participant_id"],
            epoch=int(obj["epoch"]),
            loss_value=float(obj["loss"]),
            input_shape=tuple(int(d) for d in obj["input_shape"]),
            gradients={
                k: ad.tensor_from_json(v).data for k, v in obj["gradients"].items()
            },
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CapsuleParseError(f"malformed capsule JSON: {e}") from e


def _pack_bytes(b):
    return struct.pack("<I", len(b)) + b


def serialize_capsule(capsule):
    """Binary GCAP container; float64 payloads are bit-preserved."""
    out = bytearray(_GCAP_MAGIC)
    out += _pack_bytes(capsule.model_id.encode())
    out += _pack_bytes(capsule.participant_id.encode())
    out += struct.pack("<q", capsule.epoch)
    out += struct.pack("<d", capsule.loss_value)
    out += struct.pack("<I", len(capsule.input_shape))
    out += struct.pack(f"<{len(capsule.input_shape)}I", *capsule.input_shape)
    out += struct.pack("<I", len(capsule.gradients))
    for name in sorted(capsule.gradients):
        arr = np.ascontiguousarray(capsule.gradients[name], dtype="<f8")
        out += _pack_bytes(name.encode())
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += _pack_bytes(arr.tobytes())
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise CapsuleParseError(f"truncated {what}", self.off)
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def bytes_field(self, what):
        (n,) = self.unpack("<I", what)
        return self.take(n, what)


def deserialize_capsule(buf):
    r = _Reader(buf)
    if r.take(4, "magic") != _GCAP_MAGIC:
        raise CapsuleParseError("bad GCAP magic", 0)
    model_id = r.bytes_field("model_id").decode()
    participant_id = r.bytes_field("participant_id").decode()
    (epoch,) = r.unpack("<q", "epoch")
    (loss,) = r.unpack("<d", "loss")
    (rank,) = r.unpack("<I", "input_shape rank")
    input_shape = r.unpack(f"<{rank}I", "input_shape") if rank else ()
    (count,) = r.unpack("<I", "gradient count")
    gradients = {}
    for _ in range(count):
        name = r.bytes_field("gradient name").decode()
        (grank,) = r.unpack("<I", "gradient rank")
        shape = r.unpack(f"<{grank}I", "gradient shape") if grank else ()
        payload = r.bytes_field(f"gradient {name} payload")
        n = int(np.prod(shape)) if shape else 1
        if len(payload) != 8 * n:
            raise CapsuleParseError(
                f"gradient {name}: expected {8 * n} bytes, got {len(payload)}", r.off
            )
        gradients[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if r.off != len(buf):
        raise CapsuleParseError("trailing bytes after capsule", r.off)
    return GradientCapsule(
        model_id=model_id,
        participant_id=participant_id,
        epoch=int(epoch),
        loss_value=float(loss),
        input_shape=tuple(int(d) for d in input_shape),
        gradients=gradients,
    )

"""Bidirectional RNN passes over feature-map rows and columns.

A row pass treats each row as a left-to-right sequence of channel vectors,
runs one cell forward and another backward, and sums the direction outputs
elementwise; the column pass does the same top-to-bottom on the row-pass
output. Packs fuse a small conv stack with a spatial pass, by channel
concatenation plus a 1x1 restore (pack A) or by elementwise sum (pack B).
All of these preserve the feature-map shape.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import Conv, uniform_init


@dataclass
class RnnCell:
    """One recurrence direction. Hidden size equals the channel count so the
    map shape survives; gru cells stack (r, z, n) gates along the first axis."""

    w_in: ad.Tensor
    w_h: ad.Tensor
    b: ad.Tensor
    kind: str = "tanh"  # tanh | linear | gru

    @property
    def hidden(self):
        return self.w_h.shape[1]

    def params(self, prefix):
        return {f"{prefix}.w_in": self.w_in, f"{prefix}.w_h": self.w_h, f"{prefix}.b": self.b}


def make_cell_io(input_size, hidden, rng, kind="tanh"):
    from .layers import CELL_GAIN

    mult = 3 if kind == "gru" else 1
    return RnnCell(
        w_in=uniform_init(rng, (mult * hidden, input_size), input_size, gain=CELL_GAIN),
        w_h=uniform_init(rng, (mult * hidden, hidden), hidden, gain=CELL_GAIN),
        b=ad.Tensor(np.zeros(mult * hidden), requires_grad=True),
        kind=kind,
    )


def make_cell(channels, rng, kind="tanh"):
    return make_cell_io(channels, channels, rng, kind)


@dataclass
class SpatialRnnLayer:
    x_fwd: RnnCell
    x_bwd: RnnCell
    y_fwd: RnnCell
    y_bwd: RnnCell

    def params(self, prefix):
        out = {}
        for name in ("x_fwd", "x_bwd", "y_fwd", "y_bwd"):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        return out


def make_spatial_layer(channels, rng, kind="tanh"):
    return SpatialRnnLayer(*(make_cell(channels, rng, kind) for _ in range(4)))


def _as_batched(fmap):
    if fmap.ndim == 3:
        return fmap.reshape((1,) + fmap.shape), True
    if fmap.ndim == 4:
        return fmap, False
    raise ValueError(f"spatial pass: needs [C,H,W] or [B,C,H,W], got {fmap.shape}")


def _check_cells(op, channels, fwd, bwd):
    for cell in (fwd, bwd):
        if cell.hidden != channels:
            raise ValueError(
                f"{op}: cell hidden size {cell.hidden} != channel count {channels}"
            )


def _bidir(seq, fwd, bwd):
    out_f = ad.rnn_scan(seq, fwd.w_in, fwd.w_h, fwd.b, reverse=False, cell=fwd.kind)
    out_b = ad.rnn_scan(seq, bwd.w_in, bwd.w_h, bwd.b, reverse=True, cell=bwd.kind)
    return ad.add(out_f, out_b)


def row_pass(fmap, fwd, bwd):
    """Run both direction cells along every row; rows are independent."""
    x, squeeze = _as_batched(fmap)
    b, c, h, w = x.shape
    _check_cells("row_pass", c, fwd, bwd)
    seq = x.transpose((3, 0, 2, 1)).reshape((w, b * h, c))
    out = _bidir(seq, fwd, bwd)
    out = out.reshape((w, b, h, c)).transpose((1, 3, 2, 0))
    return out.reshape((c, h, w)) if squeeze else out


def col_pass(fmap, fwd, bwd):
    """Run both direction cells along every column; columns are independent."""
    x, squeeze = _as_batched(fmap)
    b, c, h, w = x.shape
    _check_cells("col_pass", c, fwd, bwd)
    seq = x.transpose((2, 0, 3, 1)).reshape((h, b * w, c))
    out = _bidir(seq, fwd, bwd)
    out = out.reshape((h, b, w, c)).transpose((1, 3, 0, 2))
    return out.reshape((c, h, w)) if squeeze else out


def spatial_rnn(fmap, layer):
    """Row pass, then column pass over the row-pass output."""
    return col_pass(row_pass(fmap, layer.x_fwd, layer.x_bwd), layer.y_fwd, layer.y_bwd)


class RnnPackA:
    """Conv branch and spatial-RNN branch, fused by channel concat + 1x1."""

    def __init__(self, channels, rng, cell="tanh"):
        self.convs = [
            Conv(channels, channels, 3, rng),
            Conv(channels, channels, 1, rng),
            Conv(channels, channels, 3, rng),
        ]
        self.rnn = make_spatial_layer(channels, rng, cell)
        self.fuse = Conv(2 * channels, channels, 1, rng, act="none")

    def __call__(self, x):
        left = x
        for conv in self.convs:
            left = conv(left)
        right = spatial_rnn(x, self.rnn)
        return self.fuse(ad.concat([left, right], axis=1))

    def params(self, prefix):
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.conv{i}"))
        out.update(self.rnn.params(f"{prefix}.rnn"))
        out.update(self.fuse.params(f"{prefix}.fuse"))
        return out


class RnnPackB:
    """Conv branch and spatial-RNN branch, fused by elementwise sum."""

    def __init__(self, channels, rng, cell="tanh"):
        self.convs = [
            Conv(channels, channels, 3, rng),
            Conv(channels, channels, 1, rng),
            Conv(channels, channels, 3, rng),
        ]
        self.rnn = make_spatial_layer(channels, rng, cell)

    def __call__(self, x):
        left = x
        for conv in self.convs:
            left = conv(left)
        right = spatial_rnn(x, self.rnn)
        return ad.add(left, right)

    def params(self, prefix):
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.conv{i}"))
        out.update(self.rnn.params(f"{prefix}.rnn"))
        return out

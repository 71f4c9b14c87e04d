"""Layer-plan enumeration of the 5-level U-net, independent of the library.

Sums k*k*c_in*c_out + c_out for every convolution, plus 2 per channel for
each per-channel affine site. Kept free of any ``unsq`` import so it can
serve as an oracle for ``count_params``.
"""


def layer_plan(c, in_channels=1, out_classes=2):
    """Yield (kind, k, c_in, c_out) for every conv, contracting path first."""
    widths = [c * 2**level for level in range(5)]
    prev = in_channels
    for w in widths:
        yield ("down", 3, prev, w)
        yield ("down", 3, w, w)
        prev = w
    for w in reversed(widths[:-1]):
        yield ("upconv", 2, 2 * w, w)
        yield ("up", 3, 2 * w, w)
        yield ("up", 3, w, w)
    yield ("head", 1, widths[0], out_classes)


def conv_total(c):
    return sum(k * k * ci * co + co for _, k, ci, co in layer_plan(c))


def affine_total(c, kinds):
    return sum(2 * co for kind, k, _, co in layer_plan(c) if kind in kinds)


if __name__ == "__main__":
    for c in (2, 4, 16, 64):
        plain = conv_total(c)
        print(c, plain, plain + affine_total(c, {"down"}), plain + affine_total(c, {"down", "up"}))

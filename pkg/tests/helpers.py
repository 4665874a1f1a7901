"""Independent oracles and fixtures shared by the test modules."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from diode import autodiff as ad
from diode.detector import BBox, RawOutputs, assign_targets


# ---------------------------------------------------------------------------
# gradient-check catalogue: name -> (scalar function of one tensor, input sampler)


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _ltrb(rng, m):
    return rng.uniform(0.5, 3.0, size=(m, 4))


def grad_catalogue():
    """Every differentiable op, wrapped so the check is a function of one input."""

    def conv_case(stride, padding, k):
        def make(rng):
            w = rng.normal(size=(3, 2, k, k))
            b = rng.normal(size=3)
            # a small input keeps |f|, and with it the finite-difference rounding noise, low
            x = rng.normal(size=(2, 2, 4, 4))
            f = lambda t: ad.tsum(ad.square(ad.conv2d(t, ad.Tensor(w), ad.Tensor(b), stride, padding)))
            return f, x

        return make

    def conv_weight_case(rng):
        x = rng.normal(size=(2, 2, 5, 5))
        b = rng.normal(size=3)
        f = lambda t: ad.tsum(ad.square(ad.conv2d(ad.Tensor(x), t, ad.Tensor(b), 2, 1)))
        return f, rng.normal(size=(3, 2, 3, 3))

    def conv_bias_case(rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        f = lambda t: ad.tsum(ad.square(ad.conv2d(ad.Tensor(x), ad.Tensor(w), t, 1, 1)))
        return f, rng.normal(size=3)

    def binary(op):
        def make(rng):
            # near-zero factors shrink the gradient below finite-difference noise
            other = _away_from_zero(rng, (3, 4))
            f = lambda t: ad.tsum(ad.square(op(t, ad.Tensor(other))))
            return f, _away_from_zero(rng, (3, 4))

        return make

    def scalar_operand(rng):
        other = rng.normal(size=(3, 4))
        f = lambda t: ad.tsum(ad.square(ad.mul(ad.Tensor(other), t)))
        return f, rng.normal(size=(1,))

    def unary(op, sampler=None):
        def make(rng):
            x = sampler(rng) if sampler else rng.normal(size=(3, 4))
            weights = rng.normal(size=x.shape)
            return (lambda t: ad.tsum(ad.mul(op(t), ad.Tensor(weights)))), x

        return make

    def focal(rng):
        t = (rng.random((6, 3)) > 0.6).astype(float)
        return (lambda z: ad.tsum(ad.sigmoid_focal_loss(z, t))), rng.uniform(-3, 3, size=(6, 3))

    def bce(rng):
        t = rng.random((6, 3))
        return (lambda z: ad.tsum(ad.bce_with_logits(z, t))), rng.normal(size=(6, 3)) * 2

    def iou(rng):
        target = _ltrb(rng, 5)
        pred = _ltrb(rng, 5)
        # keep predicted and target sides apart so min() is differentiable
        pred = np.where(np.abs(pred - target) < 0.05, pred + 0.2, pred)
        return (lambda z: ad.tsum(ad.iou_loss(z, target))), pred

    def huber(rng):
        anchor = rng.normal(size=(4, 3))
        imp = rng.uniform(0.0, 3.0, size=(4, 3))
        x = anchor + rng.normal(size=(4, 3))
        lam, clip = 2.0, 1.5
        # avoid the kink where |lam * F * d| == clip
        slope = np.abs(lam * imp * (x - anchor))
        x = np.where(np.abs(slope - clip) < 0.05, x + 0.3, x)
        return (lambda z: ad.tsum(ad.huber_penalty(z, anchor, imp, lam, clip))), x

    def reshape_case(rng):
        w = rng.normal(size=(4, 3))
        return (lambda t: ad.tsum(ad.mul(ad.reshape(t, (4, 3)), ad.Tensor(w)))), rng.normal(size=(2, 6))

    def transpose_case(rng):
        w = rng.normal(size=(4, 2, 3))
        return (lambda t: ad.tsum(ad.mul(ad.transpose(t, (2, 0, 1)), ad.Tensor(w)))), rng.normal(size=(2, 3, 4))

    def concat_case(rng):
        other = rng.normal(size=(2, 3))
        w = rng.normal(size=(2, 7))
        f = lambda t: ad.tsum(ad.mul(ad.concat([t, ad.Tensor(other), t], axis=1), ad.Tensor(w)))
        return f, rng.normal(size=(2, 2))

    def take_rows_case(rng):
        idx = rng.integers(0, 5, size=7)
        w = rng.normal(size=(7, 2))
        return (lambda t: ad.tsum(ad.mul(ad.take_rows(t, idx), ad.Tensor(w)))), rng.normal(size=(5, 2))

    def upsample_case(rng):
        w = rng.normal(size=(1, 2, 4, 6))
        return (lambda t: ad.tsum(ad.mul(ad.upsample2x(t), ad.Tensor(w)))), rng.normal(size=(1, 2, 2, 3))

    def mean_case(rng):
        return (lambda t: ad.square(ad.mean(t))), rng.normal(size=(3, 5))

    return {
        "conv2d_s1_p1": conv_case(1, 1, 3),
        "conv2d_s2_p1": conv_case(2, 1, 3),
        "conv2d_1x1": conv_case(1, 0, 1),
        "conv2d_weight": conv_weight_case,
        "conv2d_bias": conv_bias_case,
        "add": binary(ad.add),
        "sub": binary(ad.sub),
        "mul": binary(ad.mul),
        "mul_scalar": scalar_operand,
        "neg": unary(ad.neg),
        "square": unary(ad.square),
        "relu": unary(ad.relu, lambda rng: _away_from_zero(rng, (3, 4))),
        "sigmoid": unary(ad.sigmoid, lambda rng: rng.uniform(-2, 2, size=(3, 4))),
        "exp": unary(ad.exp, lambda rng: rng.uniform(-2, 2, size=(3, 4))),
        "sum": unary(lambda t: ad.mul(ad.tsum(t), ad.tsum(t))),
        "mean": mean_case,
        "reshape": reshape_case,
        "transpose": transpose_case,
        "concat": concat_case,
        "take_rows": take_rows_case,
        "upsample2x": upsample_case,
        "sigmoid_focal_loss": focal,
        "bce_with_logits": bce,
        "iou_loss": iou,
        "huber_penalty": huber,
    }


# ---------------------------------------------------------------------------
# evaluation oracles in exact rational arithmetic


def exact_iou(a: BBox, b: BBox) -> Fraction:
    iw = min(Fraction(a.x2), Fraction(b.x2)) - max(Fraction(a.x1), Fraction(b.x1))
    ih = min(Fraction(a.y2), Fraction(b.y2)) - max(Fraction(a.y1), Fraction(b.y1))
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    area = lambda c: (Fraction(c.x2) - Fraction(c.x1)) * (Fraction(c.y2) - Fraction(c.y1))
    return inter / (area(a) + area(b) - inter)


def brute_force_flags(dets, gts, thresh):
    """TP flags in rank order from a full IoU table, recomputed per detection."""
    thresh = Fraction(thresh).limit_denominator(1000)
    ranked = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, dets[i][0], i))
    taken = set()
    flags = []
    for i in ranked:
        img, d = dets[i]
        options = [
            (exact_iou(d, g), -j) for j, (gi, g) in enumerate(gts) if gi == img and j not in taken
        ]
        options = [o for o in options if o[0] >= thresh]
        if options:
            best = max(options)
            taken.add(-best[1])
            flags.append(True)
        else:
            flags.append(False)
    return flags


def brute_force_ap(dets, gts, thresh) -> Fraction:
    """All-point AP as the exact integral of the interpolated precision curve."""
    if not gts:
        return Fraction(1) if not dets else Fraction(0)
    flags = brute_force_flags(dets, gts, thresh)
    points = []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += f
        points.append((Fraction(tp, len(gts)), Fraction(tp, k)))
    total, prev = Fraction(0), Fraction(0)
    for r in sorted({r for r, _ in points if r > 0}):
        p = max(pr for rr, pr in points if rr >= r)
        total += (r - prev) * p
        prev = r
    return total


def random_instance(rng, max_images=5, max_boxes=4, size=12, cls=0):
    """Tiny random detection problem on an integer grid (single class)."""
    n_img = int(rng.integers(1, max_images + 1))
    gts, dets = [], []
    for img in range(n_img):
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            gts.append((img, _rand_box(rng, size, cls)))
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            if gts and rng.random() < 0.6:
                # jitter a ground-truth box so matches actually happen
                g = gts[int(rng.integers(len(gts)))][1]
                x1 = int(np.clip(g.x1 + rng.integers(-2, 3), 0, size - 1))
                y1 = int(np.clip(g.y1 + rng.integers(-2, 3), 0, size - 1))
                x2 = int(np.clip(g.x2 + rng.integers(-2, 3), x1 + 1, size))
                y2 = int(np.clip(g.y2 + rng.integers(-2, 3), y1 + 1, size))
                box = BBox(x1, y1, x2, y2, cls)
            else:
                box = _rand_box(rng, size, cls)
            # coarse scores so ties occur
            score = float(rng.integers(1, 6)) / 5.0
            dets.append((img, BBox(box.x1, box.y1, box.x2, box.y2, cls, score)))
    return dets, gts


def _rand_box(rng, size, cls):
    x1, y1 = (int(v) for v in rng.integers(0, size - 1, size=2))
    x2 = int(rng.integers(x1 + 1, size + 1))
    y2 = int(rng.integers(y1 + 1, size + 1))
    return BBox(x1, y1, x2, y2, cls)


def brute_force_nms(boxes, scores, classes, thresh):
    """Reference class-wise NMS: repeatedly keep the best remaining box."""
    alive = list(range(len(boxes)))
    keep = []
    while alive:
        best = min(alive, key=lambda i: (-scores[i], classes[i], i))
        keep.append(best)
        alive.remove(best)
        bb = BBox(*boxes[best], 0)
        alive = [
            i for i in alive if classes[i] != classes[best] or float(exact_iou(bb, BBox(*boxes[i], 0))) <= thresh
        ]
    return keep


# ---------------------------------------------------------------------------
# detector outputs


def fake_outputs(cfg, boxes, classes, big=30.0):
    """Raw outputs that decode exactly to ``boxes`` via their assigned pixels."""
    tm = assign_targets(boxes, cfg, classes)
    cls, ctr, ltrb = [], [], []
    for level in range(cfg.levels):
        c = np.where(tm.cls[level] > 0, big, -big)
        cls.append(ad.Tensor(c))
        # centerness logit equal to the target's logit on positives
        p = np.clip(tm.centerness[level], 1e-9, 1 - 1e-9)
        ctr.append(ad.Tensor(np.where(tm.positive[level], np.log(p / (1 - p)), -big)[:, None]))
        ltrb.append(ad.Tensor(np.where(tm.positive[level][..., None], tm.ltrb[level], 1.0).transpose(0, 3, 1, 2)))
    return RawOutputs((0,), {0: tuple(classes)}, {0: cls}, ctr, ltrb, tuple(cfg.strides)), tm

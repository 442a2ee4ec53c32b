"""Built-in verification: central finite-difference gradient checks for
every attention primitive and pipeline, and straight-line reference
implementations (naive loops, exhaustive enumeration) that the fast paths
must match. Exposed both to the test suite and the ``selftest`` CLI
subcommand.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import torch

from .attention import (AttentionConfig, DeformableAttention, DeformableSpec,
                        MultiHeadCrossAttention, MultiHeadSelfAttention,
                        WindowAttention, WindowSpec)
from .detection import solve_assignment
from .geometry import bilinear_sample
from .igf import topk_heatmap


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def __str__(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {self.detail}"


# --- Finite differences -------------------------------------------------------

def finite_difference_check(loss_fn, tensors: list[torch.Tensor],
                            step: float = 1e-5, rtol: float = 1e-4,
                            max_per_tensor: int | None = None,
                            gen: torch.Generator | None = None) -> float:
    """Compare analytic gradients of ``loss_fn()`` against central finite
    differences; returns the max relative error. Tensors must be float64
    leaves with requires_grad. With ``max_per_tensor`` set, large tensors are
    probed at that many randomly chosen elements (the analytic gradient is
    still computed in full)."""
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = (torch.zeros_like(t) if t.grad is None else t.grad.clone()).reshape(-1)
        flat = t.data.reshape(-1)
        n = flat.numel()
        if max_per_tensor is not None and n > max_per_tensor:
            idx = torch.randperm(n, generator=gen)[:max_per_tensor]
        else:
            idx = torch.arange(n)
        for i in idx.tolist():
            orig = flat[i].item()
            flat[i] = orig + step
            with torch.no_grad():
                hi = loss_fn().item()
            flat[i] = orig - step
            with torch.no_grad():
                lo = loss_fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            a = float(analytic[i])
            denom = max(abs(a), abs(fd), 1e-3)
            worst = max(worst, abs(a - fd) / denom)
    return worst


def _rand(*shape, gen):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _params_and(module: torch.nn.Module, *extra: torch.Tensor) -> list[torch.Tensor]:
    return list(module.parameters()) + [t for t in extra if t.requires_grad]


def grad_check_msa(seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    S = int(torch.randint(2, 9, (1,), generator=gen))
    C = int(torch.randint(1, 5, (1,), generator=gen)) * 4
    msa = MultiHeadSelfAttention(AttentionConfig(C, 2)).double()
    x = _rand(S, C, gen=gen).requires_grad_()
    probe = _rand(S, C, gen=gen)
    mask = torch.rand(S, generator=gen) > 0.3
    mask[0] = True
    return finite_difference_check(lambda: (msa(x, mask) * probe).sum(),
                                   _params_and(msa, x))


def grad_check_window(seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    M = 3
    shift = (M // 2, M // 2) if seed % 2 else (0, 0)
    attn = WindowAttention(AttentionConfig(8, 2), WindowSpec(M, shift)).double()
    W, H = 5 + seed % 3, 4 + seed % 4  # non-multiples exercise padding
    x = _rand(W, H, 8, gen=gen).requires_grad_()
    probe = _rand(W, H, 8, gen=gen)
    return finite_difference_check(lambda: (attn(x) * probe).sum(),
                                   _params_and(attn, x))


def grad_check_mca(seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    S = int(torch.randint(1, 8, (1,), generator=gen))
    T = int(torch.randint(1, 8, (1,), generator=gen))
    C = 8
    mca = MultiHeadCrossAttention(AttentionConfig(C, 2)).double()
    q = _rand(S, C, gen=gen).requires_grad_()
    kv = _rand(T, C, gen=gen).requires_grad_()
    probe = _rand(S, C, gen=gen)
    return finite_difference_check(lambda: (mca(q, kv) * probe).sum(),
                                   _params_and(mca, q, kv))


def grad_check_deformable(seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    C, D = 8, 4
    deform = DeformableAttention(AttentionConfig(C, 2), DeformableSpec(D)).double()
    with torch.no_grad():  # move off the zero-offset init to a generic point
        for p in deform.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    vmap = _rand(6, 7, C, gen=gen).requires_grad_()
    q = _rand(3, C, gen=gen).requires_grad_()
    ref = torch.rand(3, 2, generator=gen, dtype=torch.float64) * 4 + 0.6
    probe = _rand(3, C, gen=gen)
    return finite_difference_check(lambda: (deform(q, ref, vmap) * probe).sum(),
                                   _params_and(deform, q, vmap))


def grad_check_hsf(seed: int) -> float:
    from .geometry import (BEVGridSpec, CameraCalibration, PointCloud,
                           voxelize_pillars)
    from .hsf import HSF, ImageFeatureMap, SceneBEVFeature

    gen = torch.Generator().manual_seed(seed)
    spec = BEVGridSpec((-4.0, 4.0), (-4.0, 4.0), 1.0)  # 8x8 BEV
    C = 8
    n = 40
    pts = torch.rand(n, 3, generator=gen, dtype=torch.float64) * 6 - 3
    pts[:, 2] = pts[:, 2].abs()
    cloud = PointCloud(points=pts, intensity=torch.rand(n, generator=gen,
                                                        dtype=torch.float64))
    calib = CameraCalibration(
        intrinsic=torch.tensor([[20.0, 0, 16], [0, 20.0, 12], [0, 0, 1]],
                               dtype=torch.float64),
        rotation=torch.tensor([[0, -1.0, 0], [0, 0, -1.0], [1.0, 0, 0]],
                              dtype=torch.float64),
        translation=torch.zeros(3, dtype=torch.float64), image_size=(32, 24))
    fmap = _rand(6, 8, C, gen=gen).requires_grad_()
    images = ImageFeatureMap(maps=fmap.unsqueeze(0), stride=4.0)
    hsf = HSF(AttentionConfig(C, 2), window_size=4).double()
    assignment = voxelize_pillars(cloud, spec, L=4)
    b_pts = SceneBEVFeature(_rand(8, 8, C, gen=gen), spec)
    probe = _rand(8, 8, C, gen=gen)

    def loss():
        out = hsf(assignment, cloud, images, [calib], b_pts)
        return (out.grid * probe).sum()

    return finite_difference_check(loss, _params_and(hsf, fmap),
                                   max_per_tensor=25, gen=gen)


def grad_check_igf(seed: int) -> float:
    from .geometry import BEVGridSpec
    from .hsf import SceneBEVFeature
    from .igf import IGF

    gen = torch.Generator().manual_seed(seed)
    spec = BEVGridSpec((-5.0, 5.0), (-5.0, 5.0), 1.0)  # 10x10 BEV
    C = 8
    igf = IGF(AttentionConfig(C, 2), num_classes=2, num_instances=4,
              deform_spec=DeformableSpec(4)).double()
    with torch.no_grad():  # leave the degenerate zero-offset init: sampling
        # at exactly integer cells has one-sided location gradients
        for p in igf.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    grid = _rand(10, 10, C, gen=gen).requires_grad_()
    probe = _rand(10, 10, C, gen=gen)
    probe_hm = _rand(2, 10, 10, gen=gen)
    # pin the top-K choice: selection is piecewise constant in the input, so
    # finite differences across a selection boundary would measure the jump
    with torch.no_grad():
        _, _, inst0 = igf(SceneBEVFeature(grid, spec))
    flat = (inst0.class_ids * 100 + inst0.positions[:, 0].long() * 10
            + inst0.positions[:, 1].long())

    def loss():
        out, hm, _ = igf(SceneBEVFeature(grid, spec), flat_indices=flat)
        return (out.grid * probe).sum() + (torch.sigmoid(hm.logits) * probe_hm).sum()

    return finite_difference_check(loss, _params_and(igf, grid),
                                   max_per_tensor=25, gen=gen)


def grad_check_loss(seed: int) -> float:
    from .detection import (DetectionDecoder, MatchResult, detection_loss,
                            Box3D, gaussian_targets)
    from .geometry import BEVGridSpec
    from .hsf import SceneBEVFeature

    gen = torch.Generator().manual_seed(seed)
    spec = BEVGridSpec((-3.0, 3.0), (-3.0, 3.0), 1.0)  # 6x6 BEV
    C = 8
    dec = DetectionDecoder(AttentionConfig(C, 2), num_classes=2,
                           num_queries=3).double()
    grid = _rand(6, 6, C, gen=gen).requires_grad_()
    gt = [Box3D(center=torch.tensor([0.7, -1.2, 0.5], dtype=torch.float64),
                size=torch.tensor([1.5, 1.0, 1.0], dtype=torch.float64),
                yaw=0.4, class_id=0),
          Box3D(center=torch.tensor([-1.4, 1.9, 0.6], dtype=torch.float64),
                size=torch.tensor([1.0, 0.8, 1.2], dtype=torch.float64),
                yaw=-1.1, class_id=1)]
    target = gaussian_targets(gt, spec, 2)
    match = MatchResult(pairs=[(0, 0), (2, 1)], unmatched_predictions=[1])
    with torch.no_grad():  # pin the query cells (piecewise-constant top-K)
        dets0, _ = dec(SceneBEVFeature(grid, spec))
    flat = dets0.query_cells[:, 0] * 6 + dets0.query_cells[:, 1]

    def loss():
        dets, hm = dec(SceneBEVFeature(grid, spec), flat_indices=flat)
        return detection_loss(dets, gt, match, [hm], target, spec)["total"]

    return finite_difference_check(loss, _params_and(dec, grid),
                                   max_per_tensor=25, gen=gen)


GRADIENT_CHECKS = {
    "msa": grad_check_msa,
    "window_attention": grad_check_window,
    "mca": grad_check_mca,
    "deformable_attention": grad_check_deformable,
    "hsf_pipeline": grad_check_hsf,
    "igf_pipeline": grad_check_igf,
    "loss_fixed_match": grad_check_loss,
}


def gradient_suite(num_seeds: int = 20, rtol: float = 1e-4) -> list[CheckResult]:
    results = []
    for name, fn in GRADIENT_CHECKS.items():
        worst = max(fn(seed) for seed in range(num_seeds))
        results.append(CheckResult(f"grad/{name}", worst < rtol,
                                   f"max rel err {worst:.2e} over {num_seeds} seeds"))
    return results


# --- Reference implementations ------------------------------------------------

def naive_bilinear(feature_map: torch.Tensor, a: float, b: float) -> torch.Tensor:
    """Scalar bilinear formula applied channel-wise with explicit loops."""
    H0, W0, C = feature_map.shape
    out = torch.zeros(C, dtype=feature_map.dtype)
    i0, j0 = math.floor(a), math.floor(b)
    fa, fb = a - i0, b - j0
    for di, wa in ((0, 1 - fa), (1, fa)):
        for dj, wb in ((0, 1 - fb), (1, fb)):
            i, j = i0 + di, j0 + dj
            if 0 <= i < H0 and 0 <= j < W0:
                out += wa * wb * feature_map[i, j]
    return out


def naive_msa(x: torch.Tensor, msa: MultiHeadSelfAttention) -> torch.Tensor:
    """Single-loop softmax(QK^T/sqrt(d))V per head, then output projection."""
    S, C = x.shape
    h = msa.cfg.num_heads
    d = msa.cfg.head_dim
    q = msa.q_proj(x)
    k = msa.k_proj(x)
    v = msa.v_proj(x)
    out = torch.zeros(S, C, dtype=x.dtype)
    for head in range(h):
        sl = slice(head * d, (head + 1) * d)
        for i in range(S):
            logits = torch.stack([(q[i, sl] * k[j, sl]).sum() / math.sqrt(d)
                                  for j in range(S)])
            w = torch.softmax(logits, dim=0)
            for j in range(S):
                out[i, sl] += w[j] * v[j, sl]
    return msa.out_proj(out)


def naive_mca(q_in: torch.Tensor, kv: torch.Tensor,
              mca: MultiHeadCrossAttention) -> torch.Tensor:
    S, C = q_in.shape
    T = kv.shape[0]
    h = mca.cfg.num_heads
    d = mca.cfg.head_dim
    q = mca.q_proj(q_in)
    k = mca.k_proj(kv)
    v = mca.v_proj(kv)
    out = torch.zeros(S, C, dtype=q_in.dtype)
    for head in range(h):
        sl = slice(head * d, (head + 1) * d)
        for i in range(S):
            logits = torch.stack([(q[i, sl] * k[j, sl]).sum() / math.sqrt(d)
                                  for j in range(T)])
            w = torch.softmax(logits, dim=0)
            for j in range(T):
                out[i, sl] += w[j] * v[j, sl]
    return mca.out_proj(out)


def naive_deformable(query: torch.Tensor, ref: torch.Tensor,
                     value_map: torch.Tensor,
                     deform: DeformableAttention) -> torch.Tensor:
    """Materialize all D samples explicitly, then blend."""
    D = deform.spec.num_points
    offsets = deform.offset_head(query).reshape(D, 2)
    weights = torch.softmax(deform.weight_head(query), dim=-1)
    values = deform.v_proj(value_map)
    acc = torch.zeros(value_map.shape[-1], dtype=query.dtype)
    for d in range(D):
        loc = ref + offsets[d]
        acc += weights[d] * naive_bilinear(values, float(loc[0]), float(loc[1]))
    return deform.out_proj(acc)


def naive_conv3x3(x: torch.Tensor, weight: torch.Tensor,
                  bias: torch.Tensor) -> torch.Tensor:
    """Six-nested-loop 3x3 convolution, stride 1, zero padding.
    x: (W, H, Cin) channel-last; weight: (Cout, Cin, 3, 3)."""
    W, H, Cin = x.shape
    Cout = weight.shape[0]
    out = torch.zeros(W, H, Cout, dtype=x.dtype)
    for r in range(W):
        for c in range(H):
            for co in range(Cout):
                acc = bias[co].clone()
                for ci in range(Cin):
                    for kr in range(3):
                        for kc in range(3):
                            rr, cc = r + kr - 1, c + kc - 1
                            if 0 <= rr < W and 0 <= cc < H:
                                acc = acc + x[rr, cc, ci] * weight[co, ci, kr, kc]
                out[r, c, co] = acc
    return out


def brute_force_assignment(cost: torch.Tensor) -> tuple[float, tuple[int, ...]]:
    """Exhaustive minimum over all column permutations (square cost)."""
    n = cost.shape[0]
    best_cost, best_perm = math.inf, None
    for perm in itertools.permutations(range(n)):
        total = sum(float(cost[i, perm[i]]) for i in range(n))
        if total < best_cost:
            best_cost, best_perm = total, perm
    return best_cost, best_perm


def fullsort_topk(scores: torch.Tensor, k: int) -> list[tuple[int, int, int, float]]:
    """Sort every (class, row, col, score) triple: descending score, then
    lexicographic (class, row, col) on ties."""
    nc, W, H = scores.shape
    rows = [(c, r, cc, float(scores[c, r, cc]))
            for c in range(nc) for r in range(W) for cc in range(H)]
    rows.sort(key=lambda t: (-t[3], t[0], t[1], t[2]))
    return rows[:k]


# --- Oracle suite --------------------------------------------------------------

def check_hungarian(trials: int = 200, n: int = 6) -> CheckResult:
    gen = torch.Generator().manual_seed(1234)
    for t in range(trials):
        cost = torch.rand(n, n, generator=gen, dtype=torch.float64)
        pairs = solve_assignment(cost)
        total = sum(float(cost[r, c]) for r, c in pairs)
        best, _ = brute_force_assignment(cost)
        if total != best:
            return CheckResult("oracle/hungarian", False,
                               f"trial {t}: {total} != exhaustive {best}")
    return CheckResult("oracle/hungarian", True, f"{trials} random {n}x{n} matrices")


def check_topk(trials: int = 50) -> CheckResult:
    gen = torch.Generator().manual_seed(99)
    for t in range(trials):
        scores = torch.randint(0, 5, (3, 6, 5), generator=gen).double() / 4
        k = int(torch.randint(1, 3 * 6 * 5 + 1, (1,), generator=gen))
        vals, flat = topk_heatmap(scores, k)
        oracle = fullsort_topk(scores, k)
        for i, (c, r, cc, s) in enumerate(oracle):
            want = (c * 6 + r) * 5 + cc
            if int(flat[i]) != want or float(vals[i]) != s:
                return CheckResult("oracle/topk", False, f"trial {t} rank {i}")
    return CheckResult("oracle/topk", True, f"{trials} maps with heavy ties")


def check_bilinear(trials: int = 20) -> CheckResult:
    gen = torch.Generator().manual_seed(7)
    worst = 0.0
    for _ in range(trials):
        fmap = torch.randn(5, 5, 3, generator=gen, dtype=torch.float64)
        uv = torch.rand(2, generator=gen, dtype=torch.float64) * 6 - 0.5
        got = bilinear_sample(fmap, uv)
        ref = naive_bilinear(fmap, float(uv[0]), float(uv[1]))
        worst = max(worst, float((got - ref).abs().max()))
    return CheckResult("oracle/bilinear", worst < 1e-12, f"max abs err {worst:.2e}")


def check_msa_oracle(trials: int = 5) -> CheckResult:
    gen = torch.Generator().manual_seed(11)
    worst = 0.0
    for _ in range(trials):
        msa = MultiHeadSelfAttention(AttentionConfig(8, 2)).double()
        x = torch.randn(6, 8, generator=gen, dtype=torch.float64)
        worst = max(worst, float((msa(x) - naive_msa(x, msa)).abs().max()))
    return CheckResult("oracle/msa", worst < 1e-10, f"max abs err {worst:.2e}")


def check_mca_oracle(trials: int = 5) -> CheckResult:
    gen = torch.Generator().manual_seed(13)
    worst = 0.0
    for _ in range(trials):
        mca = MultiHeadCrossAttention(AttentionConfig(8, 2)).double()
        q = torch.randn(4, 8, generator=gen, dtype=torch.float64)
        kv = torch.randn(3, 8, generator=gen, dtype=torch.float64)
        worst = max(worst, float((mca(q, kv) - naive_mca(q, kv, mca)).abs().max()))
    return CheckResult("oracle/mca", worst < 1e-10, f"max abs err {worst:.2e}")


def check_deformable_oracle(trials: int = 5) -> CheckResult:
    gen = torch.Generator().manual_seed(17)
    worst = 0.0
    for _ in range(trials):
        deform = DeformableAttention(AttentionConfig(8, 2), DeformableSpec(4)).double()
        with torch.no_grad():
            for p in deform.parameters():
                p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
        vmap = torch.randn(6, 6, 8, generator=gen, dtype=torch.float64)
        q = torch.randn(8, generator=gen, dtype=torch.float64)
        ref = torch.rand(2, generator=gen, dtype=torch.float64) * 4 + 0.5
        got = deform(q, ref, vmap)
        want = naive_deformable(q, ref, vmap, deform)
        worst = max(worst, float((got - want).abs().max()))
    return CheckResult("oracle/deformable", worst < 1e-10, f"max abs err {worst:.2e}")


def check_conv_oracle() -> CheckResult:
    from .hsf import BEVFuse, SceneBEVFeature
    from .geometry import BEVGridSpec

    gen = torch.Generator().manual_seed(19)
    spec = BEVGridSpec((0.0, 5.0), (0.0, 5.0), 1.0)
    fuse = BEVFuse(4, normalize=False).double()
    a = SceneBEVFeature(torch.randn(5, 5, 4, generator=gen, dtype=torch.float64), spec)
    b = SceneBEVFeature(torch.randn(5, 5, 4, generator=gen, dtype=torch.float64), spec)
    got = fuse(a, b).grid
    x = torch.cat([a.grid, b.grid], dim=-1)
    want = naive_conv3x3(x, fuse.conv.weight, fuse.conv.bias)
    err = float((got - want).abs().max())
    return CheckResult("oracle/conv3x3", err < 1e-10, f"max abs err {err:.2e}")


def check_window_roundtrip() -> CheckResult:
    gen = torch.Generator().manual_seed(23)
    x = torch.randn(12, 8, 5, generator=gen, dtype=torch.float64)
    win = WindowAttention.partition(x, 4)
    back = WindowAttention.reverse(win, 4, 12, 8)
    ok = torch.equal(back, x)
    return CheckResult("oracle/window_roundtrip", ok,
                       "bit-exact" if ok else "mismatch")


def oracle_suite() -> list[CheckResult]:
    return [
        check_hungarian(),
        check_topk(),
        check_bilinear(),
        check_msa_oracle(),
        check_mca_oracle(),
        check_deformable_oracle(),
        check_conv_oracle(),
        check_window_roundtrip(),
    ]

"""End-to-end acceptance checks, one test (or group) per criterion.

Each test carries ``@pytest.mark.criterion(n, title)``; the conftest prints a
PASS/FAIL line per criterion in the terminal summary. Slow criteria share the
session ``pretrained`` checkpoint and the 27 ``directional_runs``.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parspace import cli, datagen, linalg, losses, peft, reparam, runner, segnet
from parspace import tensor as T
from parspace.losses import LossConfig
from parspace.peft import AdapterBlock, LoraLayer, PeftStrategy
from parspace.reparam import Mode

from conftest import (DIRECTIONAL_SCENARIOS, DIRECTIONAL_SEEDS, DIRECTIONAL_STRATEGIES, numgrad,
                      rel_err)

criterion = pytest.mark.criterion


def detail(record_property, text):
    record_property("detail", text)


# ------------------------------------------------------------ 1. SVD


@criterion(1, "SVD correctness on 500 random matrices")
@pytest.mark.parametrize("backend", ["default", "python"])
def test_c01_svd_correctness(backend, monkeypatch, record_property):
    from parspace import _pykernels, kernels
    if backend == "python":
        monkeypatch.setattr(kernels, "jacobi_rows", _pykernels.jacobi_rows)
    shapes = [(2, 3), (8, 8), (8, 36), (32, 64)]
    rng = np.random.default_rng(20240)
    worst_rec = worst_orth = 0.0
    t0 = time.perf_counter()
    for i in range(500):
        d, k = shapes[i % 4]
        W = rng.standard_normal((d, k)) * 10.0 ** rng.uniform(-3, 3)
        r = linalg.svd(W)
        worst_rec = max(worst_rec, np.linalg.norm(linalg.reconstruct(r) - W) / np.linalg.norm(W))
        worst_orth = max(worst_orth, linalg.orthonormality_defect(r.U), linalg.orthonormality_defect(r.V))
        assert np.all(r.sigma >= 0) and np.all(np.diff(r.sigma) <= 0)
    elapsed = time.perf_counter() - t0
    name = kernels.BACKEND if backend == "default" else "python"
    detail(record_property, f"{name}: rec {worst_rec:.1e} orth {worst_orth:.1e} in {elapsed:.2f}s")
    assert worst_rec < 1e-10 and worst_orth < 1e-10
    assert elapsed < 10.0


# ------------------------------------------------------------ 2. gradients

INSTANCES = 20


def _probe(shape, rng):
    return rng.standard_normal(shape)


def _parser_case(mode, seed):
    rng = np.random.default_rng([2, seed])
    shape = [(3, 5), (4, 4), (8, 36), (7, 3), (4, 2, 3, 3)][seed % 5]
    rp = reparam.decompose(rng.standard_normal(shape), mode)
    rp.p.data = rp.p.data * rng.uniform(0.5, 1.5, rp.p.shape)
    C = _probe(shape, rng)
    T.backward(T.tsum(T.tanh(rp.weight()) * C))

    def loss():
        m = (rp.U.data * rp.p.data) @ rp.V.data.T
        w = rp.matricization.from_matrix(m)
        return float(np.sum(np.tanh(w) * C))

    worst = 0.0
    for t in rp.trainable_factors().values():
        saved = t.data
        x = saved.copy()
        t.data = x
        num = numgrad(loss, x)
        t.data = saved
        worst = max(worst, rel_err(t.grad, num))
    return worst


def _lora_case(seed):
    rng = np.random.default_rng([3, seed])
    d, k = rng.integers(2, 9, size=2)
    r = int(rng.integers(1, min(d, k)))
    W, x, C = rng.standard_normal((d, k)), rng.standard_normal((4, k)), rng.standard_normal((4, d))
    layer = LoraLayer(W, r, rng)
    layer.beta.data = rng.standard_normal((d, r))
    T.backward(T.tsum(T.tanh(peft.lora_forward(T.Tensor(x), layer)) * C))
    worst = 0.0
    for t in (layer.beta, layer.alpha):
        saved = t.data
        arr = saved.copy()
        t.data = arr
        num = numgrad(lambda: float(np.sum(np.tanh(x @ (W + layer.beta.data @ layer.alpha.data).T) * C)), arr)
        t.data = saved
        worst = max(worst, rel_err(t.grad, num))
    return worst


def _adapter_case(seed):
    rng = np.random.default_rng([4, seed])
    width, b = int(rng.integers(3, 9)), int(rng.integers(1, 4))
    block = AdapterBlock(width, b, rng)
    block.up.data = rng.standard_normal((b, width))
    x = rng.standard_normal((6, width))
    # finite differences are meaningless at the relu kink
    x = x[np.all(np.abs(x @ block.down.data) > 0.05, axis=1)]
    if len(x) == 0:
        x = np.abs(rng.standard_normal((1, width))) * np.sign(block.down.data.sum(axis=1))[None]
    C = rng.standard_normal(x.shape)
    T.backward(T.tsum(T.tanh(block(T.Tensor(x))) * C))
    worst = 0.0
    for t in (block.down, block.up):
        saved = t.data
        arr = saved.copy()
        t.data = arr
        num = numgrad(lambda: float(np.sum(np.tanh(x + np.maximum(x @ block.down.data, 0) @ block.up.data) * C)),
                      arr)
        t.data = saved
        worst = max(worst, rel_err(t.grad, num))
    return worst


def _loss_case(name, seed):
    rng = np.random.default_rng([5, seed])
    shape = (int(rng.integers(1, 3)), 1, 4, 4)
    z, y = rng.uniform(-4, 4, shape), (rng.random(shape) > 0.6).astype(float)
    gamma, alpha, lam = rng.uniform(0, 3), rng.uniform(0.05, 0.95), rng.uniform(0, 1)
    fn = {"bce": lambda v: losses.bce(v, y),
          "focal": lambda v: losses.focal_loss(v, y, gamma, alpha),
          "dice": lambda v: losses.dice_loss(v, y),
          "composite": lambda v: losses.composite_loss(v, y, LossConfig(lam=lam))}[name]
    t = T.Tensor(z.copy(), requires_grad=True)
    T.backward(fn(t))
    x = z.copy()
    return rel_err(t.grad, numgrad(lambda: fn(x).item(), x))


MODEL_STRATEGIES = ["full", "decoder", "lora:4", "adapter:4", "parser:coeff:conv", "parser:bases:conv",
                    "parser:both:transformer"]


def _model_case(strategy, seed, n_scalars=6, h=1e-5):
    m = segnet.ToySamModel(seed=10 + seed)
    part = peft.apply_strategy(m, strategy, seed=seed)
    # give zero-initialised PEFT factors a nonzero value so every factor carries gradient
    rng = np.random.default_rng([6, seed])
    for lora in m.loras.values():
        lora.beta.data = rng.standard_normal(lora.beta.shape) * 0.02
    for ad in m.adapters.values():
        ad.up.data = rng.standard_normal(ad.up.shape) * 0.02
    s = datagen.sample("base", seed, 0)
    img, mask, boxes = s.image[None], s.mask[None], [s.box]
    cfg = LossConfig(lam=0.25)
    T.backward(losses.composite_loss(segnet.forward(m, img, boxes), mask, cfg))
    names = sorted(part.trainable)
    analytic, numeric = [], []
    for i in rng.choice(len(names), min(n_scalars, len(names)), replace=False):
        t = part.trainable[names[i]]
        idx = tuple(int(rng.integers(n)) for n in t.shape)
        analytic.append(t.grad[idx])
        old = t.data[idx]
        vals = []
        for delta in (h, -h):
            t.data[idx] = old + delta
            with T.no_grad():
                vals.append(losses.composite_loss(segnet.forward(m, img, boxes), mask, cfg).item())
        t.data[idx] = old
        numeric.append((vals[0] - vals[1]) / (2 * h))
    return rel_err(analytic, numeric)


@criterion(2, "gradient exactness against central differences")
def test_c02_gradients(record_property):
    t0 = time.perf_counter()
    worst = {}
    for mode in Mode:
        worst[f"parser-{mode.value}"] = max(_parser_case(mode, s) for s in range(INSTANCES))
    worst["lora"] = max(_lora_case(s) for s in range(INSTANCES))
    worst["adapter"] = max(_adapter_case(s) for s in range(INSTANCES))
    for name in ("bce", "focal", "dice", "composite"):
        worst[name] = max(_loss_case(name, s) for s in range(INSTANCES))
    model_worst = max(_model_case(st_, s) for st_ in MODEL_STRATEGIES for s in range(3))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"component max {max(worst.values()):.1e}, full model max {model_worst:.1e}, "
                            f"{elapsed:.1f}s")
    for k, v in worst.items():
        assert v < 1e-5, (k, v)
    assert model_worst < 1e-4
    assert elapsed < 60.0


# ------------------------------------------------------------ 3. two forms


@criterion(3, "matrix form equals sum of rank-1 terms")
def test_c03_equivalence(record_property):
    rng = np.random.default_rng(33)
    worst = 0.0
    for i in range(100):
        d, k = int(rng.integers(1, 12)), int(rng.integers(1, 40))
        rp = reparam.decompose(rng.standard_normal((d, k)))
        rp.p.data = rng.standard_normal(rp.p.shape) * 3
        a, b = rp.matrix().data, rp.rank1_sum()
        worst = max(worst, float(np.max(np.abs(a - b))))
    detail(record_property, f"max abs diff {worst:.1e} over 100")
    assert worst < 1e-12


# ------------------------------------------------------------ 4. counts


def _closed_form(model, strategy):
    s = PeftStrategy.parse(strategy)
    size = lambda kinds: sum(t.size for n, t in model.params.items() if model.kinds[n] in kinds)  # noqa: E731
    dec = size(("decoder",))
    if s.kind == "full":
        return size(("transformer", "conv")), dec
    if s.kind == "decoder":
        return 0, dec
    if s.kind == "lora":
        return sum(s.rank * sum(model.params[n].shape) for n in model.lora_targets()), dec
    if s.kind == "adapter":
        return model.depth * 2 * model.width * s.bottleneck, dec
    enc = 0
    for n in model.decomposable:
        if s.selects(model.kinds[n]):
            shape = model.params[n].shape
            d = min(shape[0], int(np.prod(shape[1:])))
            k = max(shape[0], int(np.prod(shape[1:])))
            enc += {Mode.COEFFICIENTS: d, Mode.BASES: d * d + k * d, Mode.BOTH: d * d + d + k * d}[s.mode]
    return enc, dec


ACCOUNTED = ["full", "decoder", "lora:1", "lora:4", "adapter:2", "adapter:4", "parser:coeff:conv",
             "parser:coeff:transformer", "parser:coeff:both", "parser:bases:conv", "parser:both:conv",
             "parser:both:both"]


@criterion(4, "parameter accounting")
def test_c04_counts(record_property):
    model = segnet.ToySamModel()
    for text in ACCOUNTED:
        m = model.clone()
        part = peft.apply_strategy(m, text)
        walk_enc = sum(t.size for _, kind, t in m.named_parameters()
                       if t.requires_grad and kind in peft.ENCODER_KINDS)
        walk_dec = sum(t.size for _, kind, t in m.named_parameters() if t.requires_grad and kind == "decoder")
        assert (part.encoder_count, part.decoder_count) == _closed_form(model, text) == (walk_enc, walk_dec), text
    ratio = peft.peft_param_ratio(PeftStrategy.parse("parser:coeff:conv"), PeftStrategy.parse("lora:4"), model)
    ref = peft.FULL_SCALE_REFERENCE
    detail(record_property, f"LoRA(4):Parser-Coeff encoder ratio {float(ratio):.1f}x here "
                            f"(reference {ref['reduction_vs_peft']}, {ref['coefficients_conv_only']})")
    assert ratio > 1


# ------------------------------------------------------------ 5. frozen


@pytest.mark.slow
@criterion(5, "frozen bases and encoder bit-identical after 300 steps")
def test_c05_frozen_contract(pretrained, directional_runs, record_property):
    base = pretrained.model
    fresh = base.clone()
    peft.apply_strategy(fresh, "parser:coeff:conv")
    checked = 0
    for (sc, st_, seed), rep in directional_runs.items():
        if st_ == "parser:coeff:conv":
            assert rep.steps == 300
            for name, rp in rep.model.reparams.items():
                assert rp.U.data.tobytes() == fresh.reparams[name].U.data.tobytes()
                assert rp.V.data.tobytes() == fresh.reparams[name].V.data.tobytes()
                checked += 2
        if st_ == "decoder":
            before = base.parameter_dict()
            for name, kind, t in rep.model.named_parameters():
                if kind != "decoder":
                    assert t.data.tobytes() == before[name].data.tobytes(), name
                    checked += 1
    detail(record_property, f"{checked} tensors compared bitwise")


# ------------------------------------------------------------ 6. init


@pytest.mark.slow
@criterion(6, "LoRA and Adapter start bit-identical to the checkpoint")
@pytest.mark.parametrize("strategy", ["lora:4", "adapter:4"])
def test_c06_init_equivalence(pretrained, strategy):
    for sc in datagen.Scenario:
        img, _, boxes = datagen.batch_arrays(datagen.generate(sc, 3, 5))
        with T.no_grad():
            ref = segnet.forward(pretrained.model, img, boxes).data
            m = pretrained.model.clone()
            peft.apply_strategy(m, strategy, seed=7)
            out = segnet.forward(m, img, boxes).data
        assert out.tobytes() == ref.tobytes()


# ------------------------------------------------------------ 7. loss identities

logits = st.lists(st.floats(-30, 30, allow_nan=False), min_size=4, max_size=32)


@criterion(7, "loss and metric identities")
@settings(max_examples=150, deadline=None)
@given(logits, st.integers(0, 2 ** 32 - 1))
def test_c07_loss_identities(z, seed):
    z = np.array(z)
    y = (np.random.default_rng(seed).random(z.shape) > 0.5).astype(float)
    composite = losses.composite_loss(z, y, LossConfig(lam=0.0)).item()
    assert abs(composite - (losses.bce(z, y).item() + losses.dice_loss(z, y).item())) < 1e-15 * max(1, composite)
    assert abs(losses.focal_loss(z, y, 0.0, 0.5).item() - 0.5 * losses.bce(z, y).item()) < 1e-12
    s = losses.mask_scores(losses.binarize(z), y)
    assert s["dsc"] == s["f1"]


# ------------------------------------------------------------ 8. directional


def _mean(runs, sc, st_):
    return float(np.mean([runs[sc, st_, s].final.dsc for s in DIRECTIONAL_SEEDS]))


@pytest.mark.slow
@criterion(8, "directional ordering of full, parser and decoder-only")
def test_c08_directional(directional_runs, record_property):
    table = {(sc, st_): _mean(directional_runs, sc, st_)
             for sc in DIRECTIONAL_SCENARIOS for st_ in DIRECTIONAL_STRATEGIES}
    gain = {sc: table[sc, "parser:coeff:conv"] - table[sc, "decoder"] for sc in DIRECTIONAL_SCENARIOS}
    detail(record_property, " | ".join(
        f"{sc}: dec {table[sc, 'decoder']:.4f} parser {table[sc, 'parser:coeff:conv']:.4f} "
        f"full {table[sc, 'full']:.4f} gain {gain[sc]:+.4f}" for sc in DIRECTIONAL_SCENARIOS))
    for sc in ("medical", "remote_sensing"):
        assert table[sc, "decoder"] < table[sc, "parser:coeff:conv"] <= table[sc, "full"], sc
    assert gain["radar_shift"] < gain["medical"]


# ------------------------------------------------------------ 9/10. CLI


@pytest.fixture(scope="module")
def ckpt_dir(pretrained, tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    segnet.save_checkpoint(pretrained.model, d)
    return d


def _ablate(ckpt, axis, out):
    assert cli.main(["ablate", "--ckpt", str(ckpt), "--axis", axis, "--scenario", "remote_sensing",
                     "--seed", "0", "--out", str(out)]) == 0
    return out.read_bytes(), out.with_suffix(".csv").read_bytes()


@pytest.fixture(scope="module")
def ablations(ckpt_dir, tmp_path_factory):
    out = {}
    for axis in ("subspace", "coeff-bases"):
        d = tmp_path_factory.mktemp(axis)
        out[axis] = (_ablate(ckpt_dir, axis, d / "a.md"), _ablate(ckpt_dir, axis, d / "b.md"))
    return out


@pytest.mark.slow
@criterion(9, "ablation harness tables")
@pytest.mark.parametrize("axis", ["subspace", "coeff-bases"])
def test_c09_ablation(ablations, axis, record_property):
    (md, csv), again = ablations[axis]
    assert (md, csv) == again
    rows = csv.decode().strip().split("\n")
    assert rows[0] == ",".join(runner.CSV_COLUMNS) and len(rows) == 4
    recs = [dict(zip(runner.CSV_COLUMNS, r.split(","))) for r in rows[1:]]
    for r in recs:
        for key in ("dsc", "miou", "f1"):
            assert math.isfinite(float(r[key]))
        assert int(r["steps"]) == 300
    counts = [int(r["trainable_params"]) for r in recs]
    assert len(set(counts)) == 3
    text = md.decode()
    assert "nan" not in text.lower()
    assert sum(line.startswith("| parser:") for line in text.splitlines()) == 3
    detail(record_property, f"{axis}: " + ", ".join(f"{r['strategy']} {r['dsc']}" for r in recs))


def _digest_tree(d):
    h = hashlib.sha256()
    for p in sorted(Path(d).iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _twice(make_args, tmp_path, read):
    outs = []
    for tag in ("a", "b"):
        assert cli.main(make_args(tmp_path / tag)) == 0
        outs.append(read(tmp_path / tag))
    return outs


@pytest.mark.slow
@criterion(10, "CLI commands are byte-reproducible")
def test_c10_cli_determinism(ckpt_dir, ablations, tmp_path, capsys):
    a, b = _twice(lambda p: ["pretrain", "--seed", "3", "--steps", "30", "--min-dsc", "0", "--eval-size", "10",
                             "--out", str(p)], tmp_path / "pre", _digest_tree)
    assert a == b
    a, b = _twice(lambda p: ["finetune", "--ckpt", str(ckpt_dir), "--strategy", "parser:coeff:conv",
                             "--scenario", "radar_shift", "--steps", "60", "--out", str(p)],
                  tmp_path / "ft", Path.read_bytes)
    assert a == b
    a, b = _twice(lambda p: ["evaluate", "--ckpt", str(ckpt_dir), "--scenario", "natural", "--out", str(p)],
                  tmp_path / "ev", Path.read_bytes)
    assert a == b
    for axis, (first, second) in ablations.items():
        assert first == second, axis
    capsys.readouterr()
    outs = []
    for _ in range(2):
        cli.main(["params", "--strategy", "parser:coeff:both", "--ckpt", str(ckpt_dir), "--list"])
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]

import json
import math
import time

import numpy as np
import pytest

from pit import checkpoint
from pit.autodiff import Tensor
from pit.cli import main
from pit.config import RunConfig, dump_config, load_config, parse_text
from pit.data import WindowSampler, bundled_corpus_path, load_corpus
from pit.errors import ConfigError, CorpusNotFound, NonFiniteLoss
from pit.optim import AdamW, cosine_lr
from pit.train import build_model, build_optimizer, read_metrics, run_training, train_step

TINY = dict(n_layers=2, d_model=16, head_dim=4, gqa_ratio=2, context=32, batch_size=16)


def tiny_cfg(tmp_path, **kw):
    base = dict(TINY, out_dir=str(tmp_path / "run"), steps=10, diagnostics_interval=5)
    base.update(kw)
    return RunConfig(**base)


# -- config ------------------------------------------------------------------------------

def test_parse_typed_values():
    vals = parse_text("steps = 12   # comment\n\nlr=0.5\ntrainable_z = yes\nhead_mode = 'TT'\n")
    assert vals == {"steps": 12, "lr": 0.5, "trainable_z": True, "head_mode": "TT"}


@pytest.mark.parametrize("text", ["bogus = 1", "steps = ten", "steps", "trainable_z = maybe", "lr = 1\nlr = 2"])
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 1\nsteps = 5\n")
    assert load_config(p, env={}).seed == 1
    assert load_config(p, env={"PIT_SEED": "7"}).seed == 7
    cfg = load_config(p, {"seed": "9", "steps": "3"}, env={"PIT_SEED": "7"})
    assert (cfg.seed, cfg.steps) == (9, 3)


def test_defaults_round_trip(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(dump_config(RunConfig()))
    assert load_config(p, env={}) == RunConfig()


def test_semantic_validation():
    with pytest.raises(ConfigError):
        RunConfig(mode="teacher")
    with pytest.raises(ConfigError):
        RunConfig(d_model=30)
    with pytest.raises(ConfigError):
        RunConfig(grad_accum=0)


# -- data --------------------------------------------------------------------------------

def test_bundled_corpus():
    data = load_corpus()
    assert 90_000 <= data.size <= 110_000
    assert bundled_corpus_path().name == "corpus.txt"
    with pytest.raises(CorpusNotFound):
        load_corpus("/nonexistent/corpus.txt")


def test_windows_cover_each_epoch_once():
    data = np.arange(100, dtype=np.uint8)
    s = WindowSampler(data, context=9, batch_size=3, seed=0)
    assert s.windows.shape == (10, 10)
    seen = np.concatenate([s.next_batch()[0][:, 0] for _ in range(10)])[:30]
    # ten windows, three per batch: the first 30 draws hold every window exactly three times
    assert sorted(np.bincount(seen // 10, minlength=10)) == [3] * 10
    x, y = WindowSampler(data, 9, 2, seed=1).next_batch()
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])


def test_sampler_determinism():
    data = load_corpus()[:5000]
    a = [WindowSampler(data, 16, 4, seed=3).next_batch()[0] for _ in range(2)]
    np.testing.assert_array_equal(a[0], a[1])
    with pytest.raises(ValueError):
        WindowSampler(data[:5], 16, 4)


# -- optimizer ------------------------------------------------------------------------------

def test_cosine_schedule():
    lrs = [cosine_lr(s, 1.0, 100) for s in range(100)]
    assert lrs[0] == pytest.approx(0.5)  # warmup of 2 steps
    assert lrs[1] == pytest.approx(1.0)
    assert lrs[-1] == pytest.approx(0.1, abs=1e-3)
    assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))


def test_adamw_first_step():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    q = Tensor(np.array([[3.0]]), requires_grad=True)
    opt = AdamW([p, q], lr=0.1, weight_decay=0.5, decay=[q])
    p.grad = np.array([0.5, -4.0])
    q.grad = np.array([[2.0]])
    opt.step()
    # first bias-corrected step is lr * sign(g) up to eps
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)
    np.testing.assert_allclose(q.data, [[3.0 * (1 - 0.05) - 0.1]], atol=1e-7)


def test_clip_grad_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW([p])
    p.grad = np.array([3.0, 4.0])
    assert opt.clip_grad_norm(1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0)


# -- train_step ---------------------------------------------------------------------------------

def test_memorize_repeated_token(tmp_path):
    cfg = tiny_cfg(tmp_path)
    model = build_model(cfg)
    opt = build_optimizer(model, cfg)
    x = np.full((4, 16), 65)
    for _ in range(100):
        info = train_step(model, [(x, x)], opt, 3e-3)
    assert info["loss"] < 0.05


def test_uniform_targets_initial_loss(tmp_path):
    cfg = tiny_cfg(tmp_path, d_model=32, head_dim=8, gqa_ratio=4)
    model = build_model(cfg)
    opt = build_optimizer(model, cfg)
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (16, 32))
    y = rng.integers(0, 256, (16, 32))
    info = train_step(model, [(x, y)], opt, 1e-3)
    assert info["loss"] == pytest.approx(math.log(256), rel=0.02)


def test_loss_trend_short_run(tmp_path):
    # run-and-record: seed 0 gives 0.878 of EMA(0.8) pairs decreasing
    cfg = tiny_cfg(tmp_path, steps=50, seed=0)
    losses = run_training(cfg, data=load_corpus()[:4096])["losses"]
    ema, e = [], losses[0]
    for v in losses:
        e = 0.8 * e + 0.2 * v
        ema.append(e)
    assert np.mean(np.diff(ema) < 0) >= 0.8


def test_grad_accumulation_matches_large_batch(tmp_path):
    cfg = tiny_cfg(tmp_path, dtype="float64")
    rng = np.random.default_rng(1)
    x = rng.integers(0, 256, (8, 12))
    y = rng.integers(0, 256, (8, 12))
    m1, m2 = build_model(cfg), build_model(cfg)
    o1, o2 = build_optimizer(m1, cfg), build_optimizer(m2, cfg)
    a = train_step(m1, [(x, y)], o1, 1e-3)
    b = train_step(m2, [(x[:4], y[:4]), (x[4:], y[4:])], o2, 1e-3)
    assert a["loss"] == pytest.approx(b["loss"], rel=1e-12)
    assert a["grad_norm"] == pytest.approx(b["grad_norm"], rel=1e-10)
    for p, q in zip(m1.parameters(), m2.parameters()):
        np.testing.assert_allclose(p.data, q.data, atol=1e-12)


def test_non_finite_loss(tmp_path):
    cfg = tiny_cfg(tmp_path)
    model = build_model(cfg)
    opt = build_optimizer(model, cfg)
    model.final_norm.data[:] = np.nan
    x = np.zeros((2, 8), dtype=np.int64)
    with pytest.raises(NonFiniteLoss) as exc:
        train_step(model, [(x, x)], opt, 1e-3, step=17)
    assert exc.value.step == 17


def test_trainable_memory_stays_on_manifold(tmp_path):
    cfg = tiny_cfg(tmp_path, trainable_z=True, steps=30, lr=1e-2)
    worst = []
    z0 = build_model(cfg).head.memory.z.copy()

    def check(step, model, row):
        worst.append(model.head.interface_residual(np.float32))
        assert model.head.memory.orthonormality_defect <= 1e-8

    result = run_training(cfg, on_step=check)
    assert max(worst) <= 1e-4
    assert not np.allclose(result["model"].head.memory.z, z0)


def test_tt_drifts_on_random_data(tmp_path):
    cfg = tiny_cfg(tmp_path, head_mode="TT", steps=200, diagnostics_interval=200)
    data = np.random.default_rng(0).integers(0, 256, 40_000).astype(np.uint8)
    run_training(cfg, data=data)
    rows = read_metrics(tmp_path / "run" / "metrics.jsonl")
    assert rows[-1]["delta_ti"] > 0.1 * math.sqrt(16)


# -- run_training / CLI --------------------------------------------------------------------------

def test_zero_steps_writes_initial_diagnostics(tmp_path):
    run_training(tiny_cfg(tmp_path, steps=0))
    rows = read_metrics(tmp_path / "run" / "metrics.jsonl")
    assert len(rows) == 1 and rows[0]["step"] == 0 and rows[0]["loss"] is None
    assert rows[0]["delta_ti"] <= 1e-6
    report = json.loads((tmp_path / "run" / "diagnostics.json").read_text())
    assert report["delta_ti"] <= 1e-6


def test_metrics_schema_and_determinism(tmp_path):
    a = run_training(tiny_cfg(tmp_path / "a", checkpoint_interval=4))
    b = run_training(tiny_cfg(tmp_path / "b", checkpoint_interval=4))
    assert a["losses"] == b["losses"]
    rows = read_metrics(tmp_path / "a" / "run" / "metrics.jsonl")
    assert [r["step"] for r in rows] == list(range(11))
    assert set(rows[1]) == {"step", "tokens_seen", "loss", "ppl", "grad_norm", "delta_ti", "wall_ms"}
    assert rows[3]["tokens_seen"] == 3 * 16 * 32
    assert rows[2]["ppl"] == pytest.approx(math.exp(rows[2]["loss"]))
    assert [r["step"] for r in rows if r["delta_ti"] is not None] == [0, 5, 10]
    out = tmp_path / "a" / "run"
    assert sorted(p.name for p in out.glob("*.pitc")) == ["ckpt_000004.pitc", "ckpt_000008.pitc", "final.pitc"]
    assert len((out / "diagnostics.csv").read_text().splitlines()) == 4


def test_teacher_mode_run(tmp_path):
    e0 = np.random.default_rng(3).standard_normal((256, 16))
    checkpoint.write_matrix(tmp_path / "e0.pitm", e0)
    cfg = tiny_cfg(tmp_path, mode="teacher", teacher_embedding=str(tmp_path / "e0.pitm"), match_teacher_scale=True)
    result = run_training(cfg)
    assert result["model"].head.mode == "teacher"
    assert result["report"].delta_ti <= 1e-6
    bad = tiny_cfg(tmp_path, mode="teacher", teacher_embedding=str(tmp_path / "e0.pitm"), d_model=32, head_dim=8)
    with pytest.raises(ConfigError):
        build_model(bad)


@pytest.mark.parametrize("head_mode", ["PIT", "TT"])
def test_desk_run_small_corpus(tmp_path, head_mode):
    corpus = tmp_path / "corpus.txt"
    corpus.write_bytes(load_corpus()[:4096].tobytes())
    cfg = RunConfig(n_layers=2, d_model=32, head_dim=8, steps=300, head_mode=head_mode, corpus=str(corpus),
                    out_dir=str(tmp_path / head_mode), diagnostics_interval=100)
    t0 = time.perf_counter()
    result = run_training(cfg)
    assert time.perf_counter() - t0 < 60
    assert result["losses"][-1] < 0.7 * math.log(256)


def test_cli_train_and_trace_agree(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"n_layers = 2\nd_model = 16\nhead_dim = 4\ngqa_ratio = 2\ncontext = 32\n"
                   f"steps = 5\nout_dir = {tmp_path / 'out'}\n")
    monkeypatch.setenv("PIT_SEED", "4")
    assert main(["train", str(cfg), "--quiet", "--steps", "20"]) == 0
    capsys.readouterr()
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["steps"] == 20
    meta = checkpoint.read_checkpoint(tmp_path / "out" / "final.pitc").config["meta"]
    assert meta["run"]["seed"] == 4
    prompt = bytes(summary["eval_prompt"]).decode("latin-1")
    main(["trace", str(tmp_path / "out" / "final.pitc"), "--prompt", prompt, "-k", "1"])
    trace = json.loads(capsys.readouterr().out)
    assert trace[-1]["top_ids"] == [summary["greedy_next"]]


def test_cli_train_errors(tmp_path, capsys):
    assert main(["train", "--bogus", "1"]) == 2
    assert main(["train", "--corpus", str(tmp_path / "none.txt"), "--out_dir", str(tmp_path / "o")]) == 1
    capsys.readouterr()

import subprocess
import sys

import numpy as np
import pytest

from progstack import checkpoint
from progstack.cli import main
from progstack.model import ModelConfig, init_model

CHANCE_V100 = sum(1 / r for r in range(1, 6)) / 100  # 0.022833


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tensor_bytes(params):
    return [(k, t.tobytes()) for k, t in params.named_tensors().items()]


@pytest.fixture
def sessions(tmp_path, capsys):
    path = tmp_path / "s.txt"
    assert run(capsys, "gen-synth", "--items", 40, "--sessions", 300, "--max-len", 10,
               "--seed", 1, "--out", path)[0] == 0
    return path


def write_config(tmp_path, data_path, **sections):
    body = {"model": {"embed_dim": 8, "max_len": 10, "dilations": "1,2", "num_blocks": 2},
            "train": {"batch_size": 32, "eval_every": 10, "max_iterations": 20, "patience": 2},
            "data": {"train": data_path}}
    for sec, kv in sections.items():
        body.setdefault(sec, {}).update(kv)
    text = "".join(f"[{s}]\n" + "".join(f"{k} = {v}\n" for k, v in kv.items()) for s, kv in body.items())
    path = tmp_path / "exp.ini"
    path.write_text(text)
    return path


class TestGenSynth:
    def test_file_shape(self, tmp_path, capsys):
        path = tmp_path / "g.txt"
        code, _, _ = run(capsys, "gen-synth", "--items", 200, "--sessions", 5000,
                         "--max-len", 20, "--seed", 3, "--out", path)
        assert code == 0
        lines = path.read_text().splitlines()
        assert len(lines) == 5000
        ids = [int(x) for ln in lines for x in ln.split()]
        assert min(ids) >= 1 and max(ids) <= 200

    def test_byte_identical_reruns(self, tmp_path, capsys):
        paths = [tmp_path / "a.txt", tmp_path / "b.txt"]
        for p in paths:
            run(capsys, "gen-synth", "--items", 50, "--sessions", 100, "--max-len", 10,
                "--seed", 8, "--out", p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_tiny_vocab_rejected(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-synth", "--items", 5, "--sessions", 10, "--max-len", 5,
                           "--out", tmp_path / "x.txt")
        assert code == 1 and "items" in err

    def test_unwritable_path(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen-synth", "--items", 20, "--sessions", 10, "--max-len", 5,
                         "--out", tmp_path / "missing" / "x.txt")
        assert code == 2


class TestTrain:
    def test_cl_reaches_eight_blocks(self, tmp_path, sessions, capsys):
        cfg = write_config(tmp_path, sessions, schedule={"kind": "cl", "stack_times": 2},
                           data={"fractions": "0.4,0.6,1.0"})
        out = tmp_path / "m.ckpt"
        assert run(capsys, "train", "--config", cfg, "--out", out)[0] == 0
        raw = out.read_bytes()
        assert b"num_blocks=8" in raw[:4096]
        assert len(checkpoint.load(out).blocks) == 8
        for stage in range(3):
            lines = (tmp_path / f"m.ckpt.stage{stage}.log").read_text().splitlines()
            assert lines[0].startswith("iter=0 ")
        resolved = (tmp_path / "m.ckpt.config").read_text()
        assert "kind = cl" in resolved and "learning_rate = 0.001" in resolved

    def test_budget_zero_equals_init(self, tmp_path, sessions, capsys):
        cfg = write_config(tmp_path, sessions, train={"budget": 0, "seed": 4})
        out = tmp_path / "m.ckpt"
        assert run(capsys, "train", "--config", cfg, "--out", out)[0] == 0
        got = checkpoint.load(out)
        fresh = init_model(got.config, 4)
        assert tensor_bytes(got) == tensor_bytes(fresh)

    def test_resume_round_trip(self, tmp_path, sessions, capsys):
        cfg = write_config(tmp_path, sessions, train={"budget": 15})
        first = tmp_path / "a.ckpt"
        assert run(capsys, "train", "--config", cfg, "--out", first)[0] == 0
        cfg0 = write_config(tmp_path, sessions, train={"budget": 0})
        second = tmp_path / "b.ckpt"
        assert run(capsys, "train", "--config", cfg0, "--resume", first, "--out", second)[0] == 0
        assert tensor_bytes(checkpoint.load(first)) == tensor_bytes(checkpoint.load(second))

    def test_reproducible_logs(self, tmp_path, sessions, capsys):
        cfg = write_config(tmp_path, sessions, train={"budget": 20})
        logs = []
        for name in ("x.ckpt", "y.ckpt"):
            run(capsys, "train", "--config", cfg, "--out", tmp_path / name)
            lines = (tmp_path / f"{name}.stage0.log").read_text().splitlines()
            logs.append([ln.rsplit(" wall_ms=", 1)[0] for ln in lines])
        assert logs[0] == logs[1]
        assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()

    def test_unknown_key_named(self, tmp_path, sessions, capsys):
        cfg = write_config(tmp_path, sessions, train={"learnin_rate": 0.1})
        code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "m.ckpt")
        assert code == 1 and "learnin_rate" in err

    def test_bad_value_named(self, tmp_path, sessions, capsys):
        cfg = write_config(tmp_path, sessions, schedule={"kind": "sideways"})
        code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "m.ckpt")
        assert code == 1 and "sideways" in err

    def test_tf_schedule(self, tmp_path, sessions, capsys):
        from progstack.data import gen_linked, load_sessions, write_pairs
        src = tmp_path / "src.ckpt"
        run(capsys, "train", "--config", write_config(tmp_path, sessions, train={"budget": 10}),
            "--out", src)
        pairs = gen_linked(load_sessions(sessions, 10), 7, seed=0)
        write_pairs(pairs.subset(np.arange(200)), tmp_path / "tr.txt")
        write_pairs(pairs.subset(np.arange(200, len(pairs))), tmp_path / "te.txt")
        cfg = write_config(tmp_path, tmp_path / "tr.txt", schedule={"kind": "tf"},
                           train={"budget": 10}, data={"test": tmp_path / "te.txt"})
        out = tmp_path / "tf.ckpt"
        code, _, err = run(capsys, "train", "--config", cfg, "--resume", src, "--out", out)
        assert code == 0, err
        assert checkpoint.load(out).softmax_w.shape[1] == 8
        code, stdout, _ = run(capsys, "eval", "--ckpt", out, "--data", tmp_path / "te.txt", "--pairs")
        assert code == 0 and stdout.startswith("n=5 ")


@pytest.fixture
def four_block(tmp_path):
    p = init_model(ModelConfig(40, 8, 10, num_blocks=4), 0)
    for b in p.blocks:
        b.alpha[...] = 0.3
    path = tmp_path / "four.ckpt"
    checkpoint.save(p, path)
    return path


class TestStack:
    def test_adjacent_doubles(self, tmp_path, four_block, capsys):
        out = tmp_path / "eight.ckpt"
        code, stdout, _ = run(capsys, "stack", "--in", four_block, "--mode", "adjacent",
                              "--blocks", 4, "--out", out)
        assert code == 0 and "PASS" in stdout
        assert len(checkpoint.load(out).blocks) == 8

    def test_too_many_blocks(self, tmp_path, four_block, capsys):
        code, _, _ = run(capsys, "stack", "--in", four_block, "--mode", "cross",
                         "--blocks", 5, "--out", tmp_path / "x.ckpt")
        assert code != 0

    def test_embed_only_keeps_embedding(self, tmp_path, four_block, capsys):
        out = tmp_path / "e.ckpt"
        assert run(capsys, "stack", "--in", four_block, "--mode", "embed-only",
                   "--blocks", 2, "--out", out)[0] == 0
        assert checkpoint.load(out).embedding.tobytes() == checkpoint.load(four_block).embedding.tobytes()

    def test_modes_distinguishable(self, tmp_path, capsys):
        from progstack.stacking import StackPlan, verify_stack
        p = init_model(ModelConfig(40, 8, 10, num_blocks=2), 0)
        for i, b in enumerate(p.blocks):
            b.alpha[...] = 0.1 * (i + 1)
        src = tmp_path / "two.ckpt"
        checkpoint.save(p, src)
        outs = {}
        for mode in ("adjacent", "cross"):
            outs[mode] = tmp_path / f"{mode}.ckpt"
            run(capsys, "stack", "--in", src, "--mode", mode, "--blocks", 2, "--out", outs[mode])
        rep = verify_stack(p, checkpoint.load(outs["cross"]), StackPlan("adjacent", 2))
        assert not rep.ok


class TestEval:
    def test_chance_level_on_uniform_data(self, tmp_path, capsys):
        data = tmp_path / "u.txt"
        run(capsys, "gen-synth", "--items", 100, "--sessions", 3000, "--max-len", 10,
            "--uniform", "--concentration", 100, "--seed", 2, "--out", data)
        ckpt = tmp_path / "fresh.ckpt"
        checkpoint.save(init_model(ModelConfig(100, 16, 10, num_blocks=2), 0), ckpt)
        code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", data, "--n", 5)
        mrr = float(out.split("mrr=")[1].split()[0])
        assert code == 0
        assert CHANCE_V100 / 3 <= mrr <= CHANCE_V100 * 3

    def test_rank_one_everywhere(self, tmp_path, capsys):
        data = tmp_path / "d.txt"
        data.write_text("3 4 1\n5 1\n2 2 2 1\n")
        p = init_model(ModelConfig(5, 4, 6, num_blocks=1), 0)
        p.softmax_b[1] = 100.0
        ckpt = tmp_path / "r.ckpt"
        checkpoint.save(p, ckpt)
        code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", data)
        assert code == 0
        assert out.strip() == "n=5 mrr=1.000000 hr=1.000000 ndcg=1.000000 count=3"

    def test_deterministic(self, tmp_path, sessions, four_block, capsys):
        a = run(capsys, "eval", "--ckpt", four_block, "--data", sessions)
        b = run(capsys, "eval", "--ckpt", four_block, "--data", sessions)
        assert a == b and a[0] == 0

    def test_vocab_mismatch(self, tmp_path, capsys):
        data = tmp_path / "d.txt"
        data.write_text("1 2 99\n")
        ckpt = tmp_path / "c.ckpt"
        checkpoint.save(init_model(ModelConfig(10, 4, 6, num_blocks=1), 0), ckpt)
        code, _, err = run(capsys, "eval", "--ckpt", ckpt, "--data", data)
        assert code == 2 and "99" in err


class TestProbe:
    def test_fresh_all_ones(self, tmp_path, sessions, capsys):
        ckpt = tmp_path / "f.ckpt"
        checkpoint.save(init_model(ModelConfig(40, 8, 10, num_blocks=3), 0), ckpt)
        code, out, _ = run(capsys, "probe", "--ckpt", ckpt, "--data", sessions, "--sequences", 20)
        lines = out.splitlines()
        assert code == 0 and lines[0] == "3"
        assert all(ln.split() == ["1.000000"] * 3 for ln in lines[1:])

    def test_symmetric(self, tmp_path, sessions, four_block, capsys):
        _, out, _ = run(capsys, "probe", "--ckpt", four_block, "--data", sessions)
        rows = [ln.split() for ln in out.splitlines()[1:]]
        assert len(rows) == 4 and all(rows[i][j] == rows[j][i] for i in range(4) for j in range(4))

    def test_full_set_seed_invariant(self, tmp_path, sessions, four_block, capsys):
        n = len(sessions.read_text().splitlines()) * 10  # more than the chunked set
        a = run(capsys, "probe", "--ckpt", four_block, "--data", sessions, "--sequences", n, "--seed", 1)
        b = run(capsys, "probe", "--ckpt", four_block, "--data", sessions, "--sequences", n, "--seed", 2)
        assert a[1] == b[1]

    def test_single_block_rejected(self, tmp_path, sessions, capsys):
        ckpt = tmp_path / "one.ckpt"
        checkpoint.save(init_model(ModelConfig(40, 8, 10, num_blocks=1), 0), ckpt)
        code, _, _ = run(capsys, "probe", "--ckpt", ckpt, "--data", sessions)
        assert code == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "s.txt"
    proc = subprocess.run([sys.executable, "-m", "progstack", "gen-synth", "--items", "10",
                           "--sessions", "3", "--max-len", "4", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(out.read_text().splitlines()) == 3


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1

"""Smoke test for the iapo_py extension.

Build and place the module next to this script first:

    cargo build --release -p iapo-py --features extension-module
    cp target/release/libiapo_py.so python/iapo_py.so
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import iapo_py  # noqa: E402


def main():
    vocab = iapo_py.vocabulary()
    assert len(vocab) == 18, vocab

    task = iapo_py.generate_task(0, 3)
    assert task.check("<answer> " + task.answer + " </answer> <eos>")
    assert not task.check("1 + 2 <eos>")

    assert abs(iapo_py.normalize(3.0, [1.0, 2.0, 3.0]) - 1.2247434) < 1e-6
    assert iapo_py.normalize(5.0, [5.0, 5.0]) == 0.0
    assert iapo_py.pass_at_k([[False, False, True]], 3) == 1.0
    assert iapo_py.length_at_k([[2, 4]], 2) == 3.0

    cfg = iapo_py.ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=64)
    policy = iapo_py.Policy(cfg, seed=1, init_std=0.3)
    assert policy.num_params > 0
    logits = policy.next_logits(task.query)
    assert len(logits) == 18 and all(math.isfinite(z) for z in logits)

    completion = policy.sample(task.query, budget=12, temperature=1.0, seed=4)
    assert completion == policy.sample(task.query, budget=12, temperature=1.0, seed=4)
    profiles = {
        e: policy.mi_profile(task.query, completion, estimator=e) for e in ("naive", "preload", "chunked")
    }
    for e, p in profiles.items():
        assert len(p["scores"]) == len(completion.split())
        total = sum(p["scores"])
        assert abs(total - (p["pre"][0] - p["post"][-1])) < 1e-9, e
        for a, b in zip(p["scores"], profiles["naive"]["scores"]):
            assert abs(a - b) < 1e-6
    assert profiles["preload"]["cached_passes"][0] == len(completion.split()) + 1

    (dh, pred), = iapo_py.entropy_change([math.log(0.7), math.log(0.3)], True, [1e-3])
    assert dh < 0 and abs(dh - pred) < 1e-5

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "p.ckpt")
        policy.save(path)
        back = iapo_py.Policy.load(path)
        assert back.next_logits(task.query) == logits
        assert iapo_py.run_cli(["gen-data", "--seed", "0", "--n", "2", "--count", "3", "--out", os.path.join(d, "t.jsonl")]) == 0
        assert iapo_py.run_cli(["no-such-command"]) == 2

    print("iapo_py smoke test passed")


if __name__ == "__main__":
    main()

"""Smoke test for the avsk_py extension module.

Build first:  cargo build -p avsk-py --features extension-module
Then run:     python3 python/smoke_test.py
Set AVSK_PY_LIB to point at a specific built library.
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def find_library():
    env = os.environ.get("AVSK_PY_LIB")
    if env:
        return env
    for profile in ("release", "debug"):
        for name in ("libavsk_py.so", "libavsk_py.dylib", "avsk_py.dll"):
            path = os.path.join(ROOT, "target", profile, name)
            if os.path.exists(path):
                return path
    sys.exit("avsk_py library not found; build it with: cargo build -p avsk-py --features extension-module")


def load(tmp):
    suffix = ".pyd" if sys.platform == "win32" else ".so"
    dest = os.path.join(tmp, "avsk_py" + suffix)
    shutil.copy(find_library(), dest)
    spec = importlib.util.spec_from_file_location("avsk_py", dest)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    with tempfile.TemporaryDirectory() as tmp:
        av = load(tmp)

        examples = av.synth_generate(7, 3, speakers=2, charset=6)
        assert len(examples) == 3
        ex = examples[0]
        t, h, w, c = ex.video_shape
        assert c == 3 and t == ex.frames and len(ex.video()) == t * h * w * c
        assert ex.face_tracks == 2 and ex.speaker_spans
        shard = os.path.join(tmp, "s.avsk")
        av.save_shard(shard, examples)
        assert [e.transcript for e in av.load_shard(shard)] == [e.transcript for e in examples]

        mel = av.logmel([0.0] * 16000)
        assert len(mel) == 98 and len(mel[0]) == 80
        assert all(abs(x - math.log(1e-10)) < 1e-9 for x in mel[0])
        assert len(av.audio_features([0.0] * 16000)[0]) == 240

        assert av.wer(["a", "b", "c"], ["a", "x", "c"]) == 1 / 3
        d = av.der([("A", 0.0, 10.0)], [("A", 0.0, 8.0)])
        assert abs(d[0] - 0.2) < 1e-12, d
        ref = [("a", "A"), ("b", "A"), ("c", "B"), ("d", "B")]
        assert av.wder(ref, [("a", "A"), ("b", "A"), ("c", "B"), ("d", "A")]) == 0.25

        uniform = [[[math.log(0.5)] * 2 for _ in range(2)] for _ in range(2)]
        assert abs(av.rnnt_loss(uniform, [1]) - math.log(4)) < 1e-12

        assert abs(av.bytes_per_param(29.79 * 2**30, 0.31e9) - 103.2) < 0.1
        assert av.lp_params(32, 32, 512) == 3072 * 512 + 512
        assert av.make_drop_mask(10, "start", 0.5, 0) == [False] * 5 + [True] * 5

        cfg = av.ModelConfig.load(os.path.join(ROOT, "presets", "vsr-desk.json"))
        h1 = cfg.hash()
        cfg.steps = 5
        assert cfg.hash() != h1
        trainer = av.Trainer(cfg)
        losses = [trainer.step() for _ in range(5)]
        assert all(math.isfinite(x) for x in losses) and losses[-1] < losses[0], losses
        model = trainer.model()
        assert model.num_params() == cfg.count_params()
        ckpt = os.path.join(tmp, "m.bin")
        trainer.save(ckpt)
        again = av.Model.load(ckpt, cfg)
        test = av.synth_generate(99, 2, charset=10)
        assert again.transcribe(test[0]) == model.transcribe(test[0])
        assert 0.0 <= model.evaluate(test, "vsr") <= 10.0

        try:
            model.evaluate(test, "avsr")
        except ValueError:
            pass
        else:
            raise AssertionError("mode mismatch should raise ValueError")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()

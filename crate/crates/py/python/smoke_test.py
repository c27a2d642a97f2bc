"""End-to-end check of the Python module on a tiny synthetic scene.

Run from anywhere: ``python3 crates/py/python/smoke_test.py``. If ``wetsam`` is
not importable, the extension is built with cargo and loaded from a
temporary directory.
"""

import importlib
import json
import pathlib
import shutil
import subprocess
import sys
import tempfile

CONFIG = """
[train]
patch_size = 16
epochs = 2

[model]
width = 8
heads = 2
latents = 2

[scene]
height = 32
width = 32
timesteps = 6
blobs_per_class = 1
blob_radius = 6.0
points_per_class = 10
"""


def load_module(build_dir):
    try:
        return importlib.import_module("wetsam")
    except ImportError:
        pass
    crate = pathlib.Path(__file__).resolve().parents[1]
    subprocess.run(
        ["cargo", "build", "--release", "--features", "extension-module"],
        cwd=crate,
        check=True,
    )
    meta = subprocess.run(
        ["cargo", "metadata", "--format-version", "1", "--no-deps"],
        cwd=crate,
        check=True,
        capture_output=True,
        text=True,
    )
    target = pathlib.Path(json.loads(meta.stdout)["target_directory"]) / "release"
    lib = next(p for p in (target / "libwetsam.so", target / "libwetsam.dylib") if p.exists())
    shutil.copy(lib, pathlib.Path(build_dir) / "wetsam.so")
    sys.path.insert(0, build_dir)
    return importlib.import_module("wetsam")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        wetsam = load_module(tmp)
        print("wetsam", wetsam.version())

        scene = pathlib.Path(tmp) / "scene"
        cube, truth, points = wetsam.synth(str(scene), CONFIG)
        assert all(pathlib.Path(p).is_file() for p in (cube, truth, points))

        h, w, grown = wetsam.grow(cube, points, 0.9)
        assert (h, w) == (32, 32) and len(grown) == h * w
        assert set(grown) <= {0, 1, 2, 3, 255}
        _, _, strict = wetsam.grow(cube, points, 0.99)
        assert sum(v != 255 for v in strict) <= sum(v != 255 for v in grown)

        run = pathlib.Path(tmp) / "run"
        manifest = json.loads(wetsam.train(cube, points, str(run), CONFIG, truth))
        assert len(manifest["epochs"]) == 2
        assert all(e["l_total"] == e["l_total"] for e in manifest["epochs"])

        h, w, labels, probs = wetsam.predict(str(run / "model.wsck"), cube)
        assert len(labels) == h * w and len(probs) == h * w * 4
        for i, label in enumerate(labels):
            px = probs[4 * i : 4 * i + 4]
            assert abs(sum(px) - 1.0) < 1e-5
            assert px[label] == max(px)

        report = json.loads(wetsam.evaluate(labels, labels, h, w, 4))
        assert report["macro_f1"] == 1.0

        assert abs(wetsam.cosine_similarity([1.0, 0.0], [0.0, 2.0])) < 1e-12
        try:
            wetsam.train(cube, points, str(run), "[train]\nbogus = 1\n")
        except ValueError as e:
            assert "bogus" in str(e)
        else:
            raise AssertionError("unknown key accepted")
        try:
            wetsam.grow(str(run / "missing.wstc"), points)
        except OSError:
            pass
        else:
            raise AssertionError("missing file accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()

"""Smoke test for the Python extension.

Builds the module with cargo (unless LATENT_ADAPTER_PY_LIB points at an
already built library), imports it and runs a miniature pipeline:
dataset, codec, base training, adapter training, sampling and metrics.

    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_library():
    lib = os.environ.get("LATENT_ADAPTER_PY_LIB")
    if lib:
        return pathlib.Path(lib)
    subprocess.run(
        ["cargo", "build", "--release", "-p", "latent-adapter-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    for name in ("liblatent_adapter_py.so", "liblatent_adapter_py.dylib", "latent_adapter_py.dll"):
        path = target / "release" / name
        if path.exists():
            return path
    sys.exit("built library not found under " + str(target / "release"))


def load_module(lib, workdir):
    dest = pathlib.Path(workdir) / "latent_adapter_py.so"
    shutil.copy(lib, dest)
    loader = importlib.machinery.ExtensionFileLoader("latent_adapter_py", str(dest))
    spec = importlib.util.spec_from_file_location("latent_adapter_py", dest, loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def check(label, cond):
    print(("ok   " if cond else "FAIL ") + label)
    if not cond:
        sys.exit(1)


def main():
    lib = build_library()
    with tempfile.TemporaryDirectory() as tmp:
        la = load_module(lib, tmp)

        n = la.count_params("full-scale", "adapter", "sketch", "base")
        check(f"full-scale adapter has {n} parameters", 65e6 <= n <= 90e6)
        small = la.count_params("full-scale", "adapter", "sketch", "small")
        check("small variant is smaller", small < n)

        ks, _ = la.cubic_ks(200_000, 1000, 1)
        check(f"cubic timestep KS {ks:.4f}", ks < 0.01)

        ds = la.Dataset(scenes=6, seed=3)
        check("dataset length", len(ds) == 6)
        check("image bytes", len(ds.image(0)) == ds.resolution * ds.resolution * 3)
        check("caption " + repr(ds.caption(0)), " on " in ds.caption(0))
        check("sketch condition size", len(ds.condition("sketch", 0)) == ds.resolution**2)

        codec = la.Codec.fit(ds)
        check("codec round trip is exact", all(codec.roundtrip_exact(ds, i) for i in range(len(ds))))

        base, before, after = la.train_base(ds, codec, steps=2, batch_size=2, base_channels=8)
        check(f"base trained, held-out loss {before:.3f} -> {after:.3f}", after == after)
        adapter = la.train_adapter(base, ds, codec, "sketch", steps=2, batch_size=2)
        check(f"{adapter.kind}/{adapter.variant} adapter with {adapter.param_count()} parameters", adapter.param_count() > 0)

        path = os.path.join(tmp, "base.ckpt")
        base.save(path)
        again = la.Denoiser.load(path)
        a = la.sample(base, codec, ["large red circle center on white"], ddim_steps=3, seed=1)
        b = la.sample(again, codec, ["large red circle center on white"], ddim_steps=3, seed=1)
        check("checkpoint round trip samples identically", a == b)

        plain, metrics = la.generate(base, codec, ds, 2, ddim_steps=3)
        zero, _ = la.generate(base, codec, ds, 2, adapters=[adapter], weights=[0.0], ddim_steps=3)
        check("weight 0 equals unguided", plain == zero)
        check("metrics " + ", ".join(f"{k} {v:.3f}" for k, v in metrics.items()), set(metrics) == {"edge_f1", "palette_error", "seg_accuracy"})
    print("smoke test passed")


if __name__ == "__main__":
    main()

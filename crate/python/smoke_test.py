"""Smoke test for the gsedit Python bindings.

Build the extension first, e.g.

    pip install maturin && maturin develop -m crates/py/Cargo.toml

or copy `target/release/libgsedit_py.so` to `gsedit_py.so` on PYTHONPATH.
"""

import math
import os
import random
import sys
import tempfile

import gsedit_py as gs


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL: {what}")
    print(f"ok: {what}")


def scene_and_cameras():
    scene = gs.Scene(
        [
            gs.Gaussian.isotropic([0.0, 0.0, 0.0], 0.35, 0.9, [0.8, 0.3, 0.2]),
            gs.Gaussian.isotropic([0.3, 0.2, 0.1], 0.2, 0.8, [0.9, 0.6, 0.1]),
        ]
    )
    cams = gs.Camera.ring(count=4, radius=3.0, elevation_deg=20.0, focal=40.0, size=32)
    return scene, cams


def test_scene_and_render():
    scene, cams = scene_and_cameras()
    check(len(scene) == 2 and len(scene.params()) == 28, "scene size and parameter count")
    back = gs.Scene.from_json(scene.to_json())
    check(back.params() == scene.params(), "scene json round trip")
    cam = gs.Camera.from_json(cams[0].to_json())
    check(cam.to_json() == cams[0].to_json(), "camera json round trip")

    view = gs.render(scene, cams[0])
    check(len(view.color) == 32 and len(view.color[0]) == 32 and len(view.color[0][0]) == 3, "render shape")
    check(max(max(r) for r in view.alpha) > 0.5, "scene is visible")

    target = [[[0.5, 0.5, 0.5] for _ in range(32)] for _ in range(32)]
    loss, grad = gs.render_gradients(scene, cams[0], target)
    check(loss > 0 and len(grad) == 28, "loss and gradient")

    images = [gs.render(scene, c).color for c in cams]
    fitted, initial, final = gs.optimize_scene(scene, cams, images, steps=5)
    check(final <= initial and final < 1e-6, "identity fit stays exact")
    check(gs.psnr(gs.render(fitted, cams[1]).color, images[1]) > 35.0, "fitted render psnr")


def naive_attention(zi, zj, wq, wk, wv):
    def mm(a, b):
        return [[sum(x * b[k][j] for k, x in enumerate(row)) for j in range(len(b[0]))] for row in a]

    q, k, v = mm(zi, wq), mm(zj, wk), mm(zj, wv)
    scale = 1.0 / math.sqrt(len(wq[0]))
    out = []
    for qa in q:
        logits = [sum(x * y for x, y in zip(qa, kb)) * scale for kb in k]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        s = sum(e)
        out.append([sum(e[b] / s * v[b][x] for b in range(len(v))) for x in range(len(v[0]))])
    return out


def test_attention():
    rng = random.Random(0)

    def mat(r, c):
        return [[rng.uniform(-1, 1) for _ in range(c)] for _ in range(r)]

    ze, r1, r2 = mat(6, 4), mat(5, 4), mat(7, 4)
    wq, wk, wv = mat(4, 4), mat(4, 4), mat(4, 4)
    got = gs.attention(ze, r1, wq, wk, wv)
    want = naive_attention(ze, r1, wq, wk, wv)
    err = max(abs(a - b) for ra, rb in zip(got, want) for a, b in zip(ra, rb))
    check(err < 1e-4, f"attention matches a dense reference ({err:.2e})")

    own = gs.attention(ze, ze, wq, wk, wv)
    same = gs.attn_align(ze, [r1, r2], wq, wk, wv, lam=1.0)
    err = max(abs(a - b) for ra, rb in zip(own, same) for a, b in zip(ra, rb))
    check(err < 1e-6, "lambda = 1 is self-attention")
    swapped = gs.attn_align(ze, [r2, r1], wq, wk, wv, lam=0.6)
    plain = gs.attn_align(ze, [r1, r2], wq, wk, wv, lam=0.6)
    err = max(abs(a - b) for ra, rb in zip(swapped, plain) for a, b in zip(ra, rb))
    check(err < 1e-5, "reference order does not matter")


def test_diffusion():
    sched = gs.NoiseSchedule(1000, 50)
    check(len(sched.timestep_grid) == 51 and sched.timestep_grid[0] == 0, "timestep grid")
    cond, uncond = [1.0, 2.0, 3.0], [0.5, 0.5, 0.5]
    check(gs.guided_noise(cond, uncond, omega=0.0) == uncond, "omega 0 is unconditional")
    check(gs.guided_noise(cond, uncond, omega=1.0) == cond, "omega 1 is conditional")
    z, eps = [0.3, -0.2, 0.1], [0.1, 0.4, -0.3]
    a, b = sched.alpha_bar_at(10), sched.alpha_bar_at(11)
    there = gs.ddim_transfer(z, eps, a, b)
    back = gs.ddim_transfer(there, eps, b, a)
    check(max(abs(x - y) for x, y in zip(back, z)) < 1e-5, "ddim transfer reverses with the same noise")


def test_pipeline():
    with tempfile.TemporaryDirectory() as d:
        data = os.path.join(d, "data")
        code = gs.run_cli(["gen-data", "--seed", "3", "--scenes", "1", "--views", "4", "--out", data])
        check(code == 0, "gen-data via run_cli")
        check(gs.run_cli(["edit", "--bogus"]) == 2, "unknown flags exit with 2")
        scene_dir = os.path.join(data, "scene_000")
        job = os.path.join(d, "job.toml")
        cams = sorted(f for f in os.listdir(scene_dir) if f.startswith("camera_"))
        with open(job, "w") as f:
            f.write(f'scene = "{os.path.join(scene_dir, "scene.json")}"\n')
            f.write("cameras = [" + ", ".join(f'"{os.path.join(scene_dir, c)}"' for c in cams) + "]\n")
            f.write("source_condition = 1\ntarget_condition = 2\nddim_steps = 10\noptimize_steps = 20\n")
        result = gs.edit(job)
        check(len(result.edited) == len(cams) and len(result.rerendered) == len(cams), "edit returns every view")
        check(all(math.isfinite(v) for v in result.report.values()), "edit report is finite")
        check(result.optimize_final_loss <= result.optimize_initial_loss, "re-optimization does not regress")
        try:
            gs.edit(os.path.join(d, "missing.toml"))
        except OSError:
            check(True, "missing job raises OSError")
        else:
            check(False, "missing job raises OSError")


if __name__ == "__main__":
    test_scene_and_render()
    test_attention()
    test_diffusion()
    test_pipeline()
    print("python smoke test passed")

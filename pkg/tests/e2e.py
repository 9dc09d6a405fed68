"""End-to-end phantom pipeline driven through the command line entry point."""

import hashlib
import json
from pathlib import Path

from octquant.cli import run
from octquant.phantom import DEFAULT_THICKNESS_UM

N_SUBJECTS = 8
DIMS = (8, 160, 96)


def _spec(i):
    layers = dict(DEFAULT_THICKNESS_UM)
    # PDR subjects (odd i) get a thicker INL so the group study has a signal
    layers["INL"] = layers["INL"] + (6.0 if i % 2 else 0.0) + 1.5 * (i % 3)
    layers["RNFL"] = layers["RNFL"] + 2.0 * i
    return {
        "dims": list(DIMS),
        "layers": layers,
        "ilm_amplitude_um": 0.0,
        "hrf": {"count": 3},
        "fluids": [{"center_um": [3000.0, 320.0, 3000.0], "semi_axes_um": [2000.0, 30.0, 1500.0 + 100.0 * i],
                    "host": "ONL+IS"}],
        "seed": 100 + i,
    }


def _call(*argv):
    code = run([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"oct-quant {' '.join(map(str, argv))} exited {code}")


def run_pipeline(root, threads=1):
    """phantom -> preprocess -> evaluate -> thickness -> stats, for a small cohort.

    Returns the directory holding every output.
    """
    root = Path(root)
    for sub in ("specs", "vol", "pp", "mask", "truth", "scores", "maps", "etdrs", "svg", "stats"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    t = ["--threads", threads]
    cohort = ["subject_id,group,age,gender,duration,va_logmar"]
    for i in range(N_SUBJECTS):
        sid = f"p{i:02d}"
        spec = root / "specs" / f"{sid}.json"
        spec.write_text(json.dumps(_spec(i), sort_keys=True))
        vol, mask = root / "vol" / f"{sid}.octb", root / "mask" / f"{sid}.octb"
        _call(*t, "phantom", "--spec", spec, "--out-volume", vol, "--out-mask", mask,
              "--out-truth", root / "truth" / f"{sid}.json")
        _call(*t, "preprocess", "--in", vol, "--out", root / "pp" / f"{sid}.octb", "--bv-iters", 20)
        ref = root / "mask" / "p00.octb"
        _call(*t, "evaluate", "--gt", ref, "--pred", mask, "--out", root / "scores" / f"{sid}.csv")
        _call(*t, "thickness", "--mask", mask, "--layer", "all", "--subject-id", sid,
              "--out", root / "maps" / f"{sid}.octb", "--etdrs", root / "etdrs" / f"{sid}.json",
              "--svg", root / "svg" / f"{sid}.svg")
        cohort.append(f"{sid},{i % 2},{50 + 3 * i + (i % 3)},{(i // 2) % 2},{5 + 2 * ((i * 5) % 7)},"
                      f"{0.1 + 0.02 * i}")
    (root / "cohort.csv").write_text("\n".join(cohort) + "\n")
    _call(*t, "stats", "group", "--cohort", root / "cohort.csv", "--summaries", root / "etdrs",
          "--out", root / "stats" / "group.json", "--csv", root / "stats" / "group.csv")
    return root


def digest(root):
    """SHA-256 of every output file, keyed by relative path."""
    root = Path(root)
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }

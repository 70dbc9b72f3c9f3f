"""Shared helpers for the CLI and acceptance tests."""
import hashlib

from gaborlens.cli import main


def tree_digest(root):
    """Relative path -> sha256 for every file under ``root``."""
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(*args):
    return main([str(a) for a in args])


def pipeline(root, seed=42, j_values=(1, 3, 8), alphas=(0.0, 1.0), runs=3):
    """synth -> preprocess -> sweep -> fit/featurize per cell -> train -> evaluate grid."""
    rc = [run("synth", "--out", root / "syn", "--n-per-class", 2, "--N", 12, "--seed", seed),
          run("preprocess", "--manifest", root / "syn" / "manifest.csv", "--raw-len", 4096,
              "--out", root / "store", "--seed", seed),
          run("sweep", "--store", root / "store", "--j-values", *j_values, "--alpha-values", *alphas,
              "--lambda-count", 4, "--cv-folds", 3, "--out", root / "sweep", "--seed", seed)]
    feats = []
    for j in j_values:
        for a in alphas:
            tag = f"j{j}_a{a:g}"
            rc.append(run("fit", "--store", root / "store", "--j", j, "--alpha", a, "--lambda-count", 4,
                          "--cv-folds", 3, "--out", root / "fit" / tag, "--seed", seed))
            rc.append(run("featurize", "--fits", root / "fit" / tag, "--out", root / "feat" / tag, "--seed", seed))
            feats.append(root / "feat" / tag)
    rc.append(run("train", "--features", feats[0], "--max-epochs", 3, "--batch-size", 4,
                  "--out", root / "model", "--seed", seed))
    rc.append(run("evaluate", "--features", *feats, "--architectures", "OneD_LSTM", "OneD_TwoD_LSTM",
                  "--n-runs", runs, "--max-epochs", 2, "--batch-size", 5, "--train-fraction", 0.5,
                  "--out", root / "eval", "--seed", seed))
    rc.append(run("evaluate", "--features", feats[0], "--checkpoint", root / "model" / "model.ckpt",
                  "--out", root / "score", "--seed", seed))
    return rc, feats

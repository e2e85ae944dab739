"""End-to-end smoke run of the cfcml_py extension.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import sys
import tempfile
from pathlib import Path

import cfcml_py as cfcml


def main() -> int:
    assert cfcml.render_template("age", "57") == "The age of patient is 57"
    assert cfcml.stage_shape(4, [32, 32, 32]) == (16, [2, 2, 2])
    assert abs(cfcml.lr_at(5) - 5e-4) < 1e-15

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = tmp / "run.toml"
        config.write_text(
            f'[data]\nroot = "{tmp / "data"}"\nout_dir = "{tmp / "run"}"\n\n'
            "[train]\nepochs = 3\nbatch_size = 6\n\n"
            "[model]\nbase_channels = 2\ncommon_dim = 8\nimage_tokens = 4\n"
            "tabular_tokens = 4\nhidden = [8]\n"
        )
        n = cfcml.synthesize(str(tmp / "data"), classes=2, per_class=6, seed=1)
        log = cfcml.train(str(config))
        model = cfcml.Model.from_checkpoint(str(config), str(tmp / "run" / "best.ckpt"))
        report = model.evaluate("val")
        print(f"samples={n} epochs={len(log)} params={model.parameter_count}")
        print(f"val acc={report['multiclass']['acc']:.3f} auc={report['multiclass']['auc_macro_ovr']}")
        code = cfcml.run_cli(
            ["gap", "--config", str(config), "--checkpoint", str(tmp / "run" / "last.ckpt"),
             "--report", str(tmp / "gap.json")]
        )
        assert code == 0, code
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

import pytest

from fnode.cli import main as cli_main


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """A tiny end-to-end workspace: dataset, config and trained archive."""
    ws = tmp_path_factory.mktemp("cli_ws")
    data = ws / "data_a.jsonl"
    rc = cli_main(
        [
            "generate-data", "--set", "a", "--out", str(data),
            "--seed", "11", "--n-per-class", "4", "--n-classes", "3", "--n-points", "5",
        ]
    )
    assert rc == 0

    config = ws / "config.txt"
    config.write_text(
        "\n".join(
            [
                "# tiny training configuration used by the test suite",
                "p = 3",
                "d_gamma = 4",
                "f_hidden = 8,8",
                "enc_hidden = 16",
                "dec_hidden = 8",
                "hyper_hidden = 8",
                "sigma_x = 0.1",
                "epochs = 6",
                "batch_size = 6",
                "kl_anneal_epochs = 3",
                "seed = 5",
                "n_gamma = 3",
                "gmm_components = 1:4",
                "gmm_cov_types = diag",
            ]
        )
        + "\n"
    )

    model = ws / "model.json"
    rc = cli_main(
        ["train", "--data", str(data), "--config", str(config), "--out", str(model)]
    )
    assert rc == 0
    return {"dir": ws, "data": data, "config": config, "model": model}

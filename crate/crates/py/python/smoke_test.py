"""Smoke test for the pyslate extension module.

Build and install first, e.g. `pip install --no-build-isolation crates/py`.
"""

import math
import os
import tempfile

import pyslate


def main():
    children = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]
    mean = [sum(c[d] for c in children) / 3 for d in range(2)]
    pairs = [(0, 1), (0, 2), (1, 2)]
    cross = [sum(children[i][d] * children[j][d] for i, j in pairs) / 3 for d in range(2)]
    got = pyslate.compose(children)
    assert all(abs(g - (m + c)) < 1e-12 for g, m, c in zip(got, mean, cross)), got
    assert pyslate.compose(children[::-1]) == got

    probs = pyslate.softmax([0.3, -1.0, 2.5])
    assert abs(sum(probs) - 1.0) < 1e-12
    rank, rr, ndcg = pyslate.rank_metrics([0.1, 0.9, 0.9, 0.2], 2)
    assert (rank, rr) == (2, 0.5) and abs(ndcg - 1 / math.log2(3)) < 1e-15

    data, planted = pyslate.Dataset.synthetic("click", records=400, seed=3, planted_std=2.0)
    assert data.sizes == (320, 40, 40), data.sizes
    result = pyslate.train(data, "semb1", epochs=10, learning_rate=0.03, batch_size=64, seed=1)
    assert result.history[0]["epoch"] == 0
    assert result.best["metric"] == "mrr"
    report = result.model.evaluate(data, "mrr")
    assert report["value"] == result.best["value"]
    assert planted.evaluate(data, "nll")["count"] == 40

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        result.model.save(path)
        again = pyslate.Model.load(path)
        assert again.evaluate(data, "mrr")["value"] == report["value"]
        rows = again.export_features(data, os.path.join(tmp, "features.csv"))
        assert rows == 40 * 10
        data.save(os.path.join(tmp, "data"))
        loaded = pyslate.Dataset.load(
            os.path.join(tmp, "data", "schema.toml"),
            os.path.join(tmp, "data", "train.jsonl"),
            os.path.join(tmp, "data", "validation.jsonl"),
        )
        assert loaded.sizes == (320, 40, 0)

    try:
        pyslate.train(data, "regression")
    except ValueError as e:
        assert "regression" in str(e)
    else:
        raise AssertionError("training a regression model on click data must fail")

    print(f"ok: {result.model!r}, best {result.best['metric']} {result.best['value']:.4f}")


if __name__ == "__main__":
    main()

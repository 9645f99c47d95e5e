import numpy as np
import pytest

from dsbf.data import DomainDataset, read_csv, write_csv
from dsbf.numerics import make_rng


def _domains():
    r = np.random.default_rng(0)
    return [DomainDataset(0, r.normal(size=(5, 3)), r.integers(0, 3, 5)),
            DomainDataset(1, r.normal(size=(4, 3)) * 1e-300, r.integers(0, 3, 4)),
            DomainDataset(2, r.normal(size=(3, 3)))]


def test_csv_round_trip_is_exact(tmp_path):
    src = _domains()
    write_csv(tmp_path / "d.csv", src)
    back = read_csv(tmp_path / "d.csv")
    assert [d.domain_id for d in back] == [0, 1, 2]
    for a, b in zip(src, back):
        assert a.x.tobytes() == b.x.tobytes()
        assert (a.y is None and b.y is None) or np.array_equal(a.y, b.y)


def test_csv_hide_labels(tmp_path):
    write_csv(tmp_path / "d.csv", _domains(), hide_labels={0})
    back = read_csv(tmp_path / "d.csv")
    assert back[0].y is None and back[1].y is not None
    assert (tmp_path / "d.csv").read_text().splitlines()[1].startswith("0,-1,")


def test_csv_rejects_mixed_labels(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("domain_id,label,feature_0\n0,1,0.5\n0,-1,0.25\n")
    with pytest.raises(ValueError, match="mixes"):
        read_csv(p)


@pytest.mark.parametrize("text", ["", "a,b,c\n0,1,2\n", "domain_id,label,feature_0\n"])
def test_csv_rejects_bad_files(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(ValueError):
        read_csv(p)


def test_write_rejects_dim_mismatch(tmp_path):
    with pytest.raises(ValueError):
        write_csv(tmp_path / "d.csv", [DomainDataset(0, np.ones((1, 2))), DomainDataset(1, np.ones((1, 3)))])


def test_dataset_validation():
    with pytest.raises(ValueError):
        DomainDataset(0, np.ones(3))
    with pytest.raises(ValueError):
        DomainDataset(0, np.ones((3, 2)), [0, 1])
    with pytest.raises(ValueError):
        DomainDataset(0, np.ones((2, 2)), [0, -1])


def test_unlabeled_hides_labels_without_copying_x():
    d = _domains()[0]
    u = d.unlabeled()
    assert u.y is None and not u.labeled and u.x is d.x and d.labeled


def test_split_partitions_rows():
    d = DomainDataset(0, np.arange(20.0).reshape(10, 2), np.arange(10) % 2)
    tr, va = d.split(0.9, make_rng(0))
    assert (tr.n, va.n) == (9, 1)
    assert sorted(np.concatenate([tr.x[:, 0], va.x[:, 0]]).tolist()) == d.x[:, 0].tolist()
    np.testing.assert_array_equal(tr.y, (tr.x[:, 0] / 2) % 2)


def test_split_keeps_one_validation_row():
    tr, va = DomainDataset(0, np.ones((2, 1))).split(1.0, make_rng(0))
    assert (tr.n, va.n) == (1, 1)

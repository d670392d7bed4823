import numpy as np
import pytest
from PIL import Image

from ccreid.adapters import ltcc_records, main, prcc_records
from ccreid.data import load_manifest
from ccreid.errors import ManifestError


def touch(root, parsing_root, rel):
    for base, arr in ((root, np.zeros((8, 4, 3), np.uint8)), (parsing_root, np.zeros((8, 4), np.uint8))):
        path = (base / rel).with_suffix(".png") if base is parsing_root else base / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path, format="PNG")


def fake_prcc(tmp_path):
    root, parsing = tmp_path / "prcc", tmp_path / "prcc_parsing"
    rels = ["train/001/A_1.jpg", "train/001/B_1.jpg", "train/001/C_1.jpg", "train/002/A_1.jpg",
            "train/002/C_1.jpg", "test/A/003/x.jpg", "test/B/003/y.jpg", "test/C/003/z.jpg"]
    for rel in rels:
        touch(root / "rgb", parsing, rel)
    return root, parsing


def test_prcc_layout(tmp_path):
    root, parsing = fake_prcc(tmp_path)
    records = prcc_records(root, parsing)
    by_name = {r.image_path.split("rgb/")[1]: r for r in records}
    a, b, c = by_name["train/001/A_1.jpg"], by_name["train/001/B_1.jpg"], by_name["train/001/C_1.jpg"]
    assert a.clothes_id == b.clothes_id != c.clothes_id
    assert (a.camera_id, b.camera_id, c.camera_id) == (0, 1, 2)
    assert by_name["test/A/003/x.jpg"].split == "gallery"
    assert {by_name["test/B/003/y.jpg"].split, by_name["test/C/003/z.jpg"].split} == {"query"}
    assert a.parsing_path.endswith("prcc_parsing/train/001/A_1.png")


def test_prcc_manifest_loads(tmp_path):
    root, parsing = fake_prcc(tmp_path)
    assert main(["prcc", str(root), str(parsing), str(tmp_path / "m.tsv")]) == 0
    m = load_manifest(tmp_path / "m.tsv")
    assert m.K == 2 and len(m.records) == 8


def test_ltcc_names(tmp_path):
    root, parsing = tmp_path / "ltcc", tmp_path / "ltcc_parsing"
    for rel in ["train/001_1_c3_000.png", "train/001_2_c4_000.png", "query/005_1_c1_000.png",
                "test/005_2_c2_000.png"]:
        touch(root, parsing, rel)
    records = ltcc_records(root, parsing)
    assert [(r.identity, r.camera_id, r.split) for r in records] == [
        (1, 3, "train"), (1, 4, "train"), (5, 1, "query"), (5, 2, "gallery")]
    assert len({r.clothes_id for r in records}) == 4


def test_bad_ltcc_name(tmp_path):
    root = tmp_path / "ltcc"
    touch(root, tmp_path / "p", "train/whatever.png")
    with pytest.raises(ManifestError, match="file name"):
        ltcc_records(root, tmp_path / "p")


def test_empty_tree(tmp_path):
    with pytest.raises(ManifestError):
        prcc_records(tmp_path, tmp_path)

"""Build manifests from the public PRCC and LTCC directory layouts.

The datasets are not bundled. Parsing maps are expected in a separate tree
that mirrors the image tree, one single-channel PNG per image with the same
relative path and a ``.png`` suffix.

PRCC::

    rgb/train/<pid>/{A,B,C}_*.jpg
    rgb/test/{A,B,C}/<pid>/*.jpg

Camera A and B show the same outfit, camera C a different one. Test folder A
is the gallery; B and C together are the query set, so the same-clothes and
cloth-changing protocols select B and C queries respectively.

LTCC::

    {train,query,test}/<pid>_<clothes>_c<cam>_<frame>.png

``test`` is the gallery.

    python -m ccreid.adapters prcc /data/prcc /data/prcc_parsing prcc.tsv
"""
from __future__ import annotations

import argparse
import re
from pathlib import Path

from .data import DatasetManifest, Sample, save_manifest
from .errors import ManifestError

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}
_PRCC_CAMS = {"A": 0, "B": 1, "C": 2}
_LTCC_NAME = re.compile(r"^(\d+)_(\d+)_c(\d+)_")


def _images(folder: Path):
    return sorted(p for p in folder.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


class _ClothesIds:
    """Globally unique clothes ids from (identity, outfit) keys."""

    def __init__(self):
        self.ids: dict[tuple[int, str], int] = {}

    def __call__(self, pid: int, outfit) -> int:
        return self.ids.setdefault((pid, str(outfit)), len(self.ids))


def _parsing_for(image: Path, image_root: Path, parsing_root: Path) -> str:
    return str((parsing_root / image.relative_to(image_root)).with_suffix(".png"))


def prcc_records(root, parsing_root) -> list[Sample]:
    root, parsing_root = Path(root), Path(parsing_root)
    image_root = root / "rgb" if (root / "rgb").is_dir() else root
    clothes = _ClothesIds()
    records = []

    def add(path: Path, pid: int, cam_letter: str, split: str):
        # A and B share an outfit; C is the changed one
        outfit = "C" if cam_letter == "C" else "AB"
        records.append(Sample(str(path), pid, clothes(pid, outfit), _PRCC_CAMS[cam_letter],
                              _parsing_for(path, image_root, parsing_root), split))

    train = image_root / "train"
    for pid_dir in sorted(d for d in train.iterdir() if d.is_dir()) if train.is_dir() else []:
        for path in _images(pid_dir):
            letter = path.name[0].upper()
            if letter not in _PRCC_CAMS:
                raise ManifestError(f"{path}: PRCC train file names start with A, B or C")
            add(path, int(pid_dir.name), letter, "train")
    for letter, split in (("A", "gallery"), ("B", "query"), ("C", "query")):
        folder = image_root / "test" / letter
        for pid_dir in sorted(d for d in folder.iterdir() if d.is_dir()) if folder.is_dir() else []:
            for path in _images(pid_dir):
                add(path, int(pid_dir.name), letter, split)
    if not records:
        raise ManifestError(f"no PRCC images found under {image_root}")
    return records


def ltcc_records(root, parsing_root) -> list[Sample]:
    root, parsing_root = Path(root), Path(parsing_root)
    clothes = _ClothesIds()
    records = []
    for folder, split in (("train", "train"), ("query", "query"), ("test", "gallery")):
        for path in _images(root / folder) if (root / folder).is_dir() else []:
            m = _LTCC_NAME.match(path.name)
            if not m:
                raise ManifestError(f"{path}: expected <pid>_<clothes>_c<cam>_<frame> file name")
            pid, outfit, cam = (int(g) for g in m.groups())
            records.append(Sample(str(path), pid, clothes(pid, outfit), cam,
                                  _parsing_for(path, root, parsing_root), split))
    if not records:
        raise ManifestError(f"no LTCC images found under {root}")
    return records


ADAPTERS = {"prcc": prcc_records, "ltcc": ltcc_records}


def write_manifest(dataset: str, root, parsing_root, out) -> int:
    """Write the manifest for ``dataset`` to ``out``; returns the record count.

    Labels are written as found on disk; ``load_manifest`` makes them dense.
    """
    records = ADAPTERS[dataset](root, parsing_root)
    save_manifest(DatasetManifest(records, 0, 0, name=dataset), out)
    return len(records)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Write a manifest for a PRCC or LTCC copy.")
    parser.add_argument("dataset", choices=sorted(ADAPTERS))
    parser.add_argument("root", help="dataset root")
    parser.add_argument("parsing_root", help="parsing maps mirroring the image tree")
    parser.add_argument("out", help="manifest path to write")
    args = parser.parse_args(argv)
    n = write_manifest(args.dataset, args.root, args.parsing_root, args.out)
    print(f"wrote {n} records to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

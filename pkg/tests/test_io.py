import json

import numpy as np
import pytest

from mtlpose import io
from mtlpose.errors import InvalidArgumentError
from mtlpose.synth import synth_dataset


def test_ppm_round_trip_of_quantized_image(tmp_path):
    img = np.round(np.random.default_rng(0).random((3, 5, 7)) * 255) / 255
    io.write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(io.read_image(tmp_path / "a.ppm"), img.astype(np.float32))
    assert io.read_ppm(tmp_path / "a.ppm").shape == (5, 7, 3)


def test_ppm_header_comments_and_bad_magic(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03")
    assert io.read_ppm(tmp_path / "c.ppm").tolist() == [[[1, 2, 3]]]
    (tmp_path / "d.ppm").write_bytes(b"P3\n1 1\n255\n1 2 3\n")
    with pytest.raises(InvalidArgumentError):
        io.read_ppm(tmp_path / "d.ppm")


def test_png_input(tmp_path):
    from PIL import Image

    arr = np.random.default_rng(1).integers(0, 256, (4, 6, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "x.png")
    assert np.array_equal(io.read_image(tmp_path / "x.png"), arr.transpose(2, 0, 1) / np.float32(255))


def test_dataset_round_trip(tmp_path):
    samples = synth_dataset(6, seed=2, size=32)
    io.write_dataset(samples, tmp_path / "d")
    ds = io.read_dataset(tmp_path / "d")
    assert np.array_equal(ds.images, np.stack([s.image for s in samples]))
    assert np.array_equal(ds.joints, np.stack([s.joints for s in samples]))
    assert np.array_equal(ds.normalizers, np.stack([s.normalizer for s in samples]))
    assert io.read_dataset(tmp_path / "d" / io.ANNOTATIONS, size=16).images.shape == (6, 3, 16, 16)


def test_occluded_records_are_skipped(tmp_path):
    io.write_dataset(synth_dataset(3, seed=2, size=16), tmp_path)
    path = tmp_path / io.ANNOTATIONS
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    recs[1]["occluded"] = True
    path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    assert len(io.read_dataset(tmp_path)) == 2


@pytest.mark.parametrize("line", ["{not json", '{"image": "a.ppm", "joints": [[0, 0]]}'])
def test_bad_records(tmp_path, line):
    (tmp_path / io.ANNOTATIONS).write_text(line + "\n")
    with pytest.raises(InvalidArgumentError):
        io.read_records(tmp_path)


def test_predictions_file(tmp_path):
    io.write_predictions(tmp_path / "p.jsonl", ["a", "b"], np.zeros((2, 8, 2)))
    recs = io.read_records(tmp_path / "p.jsonl")
    assert [r["image"] for r in recs] == ["a", "b"]

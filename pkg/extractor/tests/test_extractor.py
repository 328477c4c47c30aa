import numpy as np
import pytest
import torch

from dbfextract import ExtractorSpec, build_backbone, extract, preprocess
from dbfextract.cli import main
from dbfextract.extract import ShapeMismatchError, list_inputs, write_dbf
from dbfextract.models import EXPECTED_SHAPES

# the consumer side of the .dbf contract
from deepbof import tensorio

ALL_SPECS = [
    ExtractorSpec("vgg16", 1),
    ExtractorSpec("vgg16", 2),
    ExtractorSpec("vgg16", 3),
    ExtractorSpec("alexnet"),
    ExtractorSpec("resnet50"),
]


@pytest.fixture(scope="module")
def crop_dir(tmp_path_factory):
    """Three fake 240 x 120 upper-face crops."""
    import cv2

    d = tmp_path_factory.mktemp("crops")
    rng = np.random.default_rng(0)
    for i in range(3):
        image = rng.integers(0, 256, size=(120, 240, 3), dtype=np.uint8)
        cv2.imwrite(str(d / f"crop{i}.png"), image)
    return d


class TestSpec:
    def test_expected_shapes_pinned(self):
        assert EXPECTED_SHAPES["vgg16"] == (14, 14, 512)
        assert EXPECTED_SHAPES["alexnet"] == (13, 13, 256)
        assert EXPECTED_SHAPES["resnet50"] == (7, 7, 2048)

    def test_vgg_requires_fm(self):
        with pytest.raises(ValueError):
            ExtractorSpec("vgg16")

    def test_fm_rejected_elsewhere(self):
        with pytest.raises(ValueError):
            ExtractorSpec("alexnet", 1)

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            ExtractorSpec("mobilenet")


class TestPreprocess:
    def test_wide_crop_padded_square_then_resized(self):
        image = np.zeros((120, 240, 3), dtype=np.uint8)
        out = preprocess(image)
        assert out.shape == (3, 224, 224)
        assert out.dtype == np.float32

    def test_grayscale_replicated(self):
        image = np.full((50, 50), 128, dtype=np.uint8)
        out = preprocess(image)
        assert out.shape == (3, 224, 224)
        # all three channels normalized from the same gray level
        assert np.isfinite(out).all()


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.tag)
def test_emitted_shape_and_primary_validation(spec, crop_dir, tmp_path):
    out = tmp_path / spec.tag
    images = list_inputs(crop_dir)
    count = extract(images, spec, out, weights="random", seed=7)
    assert count == 3
    for path in sorted(out.glob("*.dbf")):
        fm = tensorio.read_feature_map(path)  # primary-side validation
        assert fm.shape == spec.expected_shape
        assert np.isfinite(fm).all()
        # every tap sits after a rectifier
        assert (fm >= 0).all()


def test_repeated_extraction_bit_identical(crop_dir, tmp_path):
    spec = ExtractorSpec("alexnet")
    images = list_inputs(crop_dir)
    extract(images, spec, tmp_path / "a", weights="random", seed=3)
    extract(images, spec, tmp_path / "b", weights="random", seed=3)
    for name in ("crop0.dbf", "crop1.dbf", "crop2.dbf"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_shape_guard_trips_on_wrong_layer(crop_dir, tmp_path, monkeypatch):
    import importlib

    # the package re-exports extract() under the submodule's name, so the
    # module object has to come from sys.modules
    extract_mod = importlib.import_module("dbfextract.extract")
    spec = ExtractorSpec("alexnet")
    truncated = build_backbone(spec, weights="random", seed=0)[:6]  # conv3, wrong tap
    monkeypatch.setattr(extract_mod, "build_backbone", lambda *a, **k: truncated)
    with pytest.raises(ShapeMismatchError, match="wrong layer"):
        extract_mod.extract(list_inputs(crop_dir), spec, tmp_path / "x", weights="random")


def test_manifest_input_resolves_paths(crop_dir, tmp_path):
    manifest = tmp_path / "manifest.tsv"
    manifest.write_text(
        "".join(f"{crop_dir}/crop{i}.png\tid{i}\t0\n" for i in range(2))
    )
    images = list_inputs(manifest)
    assert [p.name for p in images] == ["crop0.png", "crop1.png"]


def test_write_dbf_matches_primary_reader(tmp_path, rng=np.random.default_rng(5)):
    fm = rng.normal(size=(4, 6, 3)).astype(np.float32)
    write_dbf(fm, tmp_path / "x.dbf")
    back = tensorio.read_feature_map(tmp_path / "x.dbf")
    assert np.array_equal(back.view(np.uint32), fm.view(np.uint32))


def test_cli_end_to_end(crop_dir, tmp_path, capsys):
    out = tmp_path / "feat"
    code = main(
        ["--model", "alexnet", "--in", str(crop_dir), "--out", str(out),
         "--weights", "random", "--seed", "1"]
    )
    assert code == 0
    assert "wrote 3 feature maps" in capsys.readouterr().out
    assert len(list(out.glob("*.dbf"))) == 3


def test_cli_reports_empty_input(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main(
        ["--model", "alexnet", "--in", str(empty), "--out", str(tmp_path / "o"),
         "--weights", "random"]
    )
    assert code == 2
    assert "no input images" in capsys.readouterr().err


def test_pretrained_unobtainable_is_a_clear_error(monkeypatch):
    # simulate the offline case regardless of any primed local cache
    from torchvision import models as tvm

    def boom(*a, **k):
        raise OSError("download blocked")

    monkeypatch.setattr(tvm, "alexnet", boom)
    with pytest.raises(RuntimeError, match="not obtainable"):
        build_backbone(ExtractorSpec("alexnet"), weights="pretrained")


def test_inference_is_deterministic_tensor_level(crop_dir):
    spec = ExtractorSpec("resnet50")
    backbone = build_backbone(spec, weights="random", seed=11)
    import cv2

    image = cv2.imread(str(sorted(crop_dir.glob("*.png"))[0]))
    batch = torch.from_numpy(np.stack([preprocess(image)]))
    with torch.no_grad():
        a = backbone(batch).numpy()
        b = backbone(batch).numpy()
    assert np.array_equal(a, b)

"""Tokenizers, binary containers, config parsing, and split files."""

import json
import struct

import numpy as np
import pytest

from gatefuse.config import (DataConfig, ModelConfig, RunConfig, TrainConfig,
                             config_from_dict, config_to_dict, load_config)
from gatefuse.data import (BOS_ID, EOS_ID, PAD_ID, ByteTokenizer, WordTokenizer,
                           load_split, load_tokenizer, make_split, save_split)
from gatefuse.errors import DataFormatError, InvalidArgument
from gatefuse.formats import (read_checkpoint, read_embeddings, write_checkpoint,
                              write_embeddings)


# -- byte tokenizer --------------------------------------------------------------


def test_byte_encode_ab():
    ids = ByteTokenizer().encode("ab")
    assert ids.tolist() == [BOS_ID, 97 + 3, 98 + 3, EOS_ID]
    assert ids.dtype == np.int64


def test_byte_encode_empty():
    assert ByteTokenizer().encode("").tolist() == [BOS_ID, EOS_ID]


@pytest.mark.parametrize("text", [
    "hello world",
    "héllo wörld",
    "日本語のテキスト",
    "emoji \U0001f642\U0001f680 mix",
    "tab\tand\nnewline",
    "",
])
def test_byte_roundtrip(text):
    tok = ByteTokenizer()
    assert tok.decode(tok.encode(text)) == text


def test_byte_body_never_special():
    # Every body id sits at byte+3, so ids 0..2 stay reserved.
    ids = ByteTokenizer().encode("\x00\x01\x02 plain")
    assert ids[0] == BOS_ID and ids[-1] == EOS_ID
    assert all(i >= 3 for i in ids[1:-1].tolist())


def test_byte_decode_skips_specials():
    assert ByteTokenizer().decode([BOS_ID, 100, PAD_ID, 101, EOS_ID]) == "ab"


def test_byte_vocab_size():
    assert ByteTokenizer().vocab_size == 259


def test_byte_token_surface():
    tok = ByteTokenizer()
    assert tok.token_surface(PAD_ID) == "<pad>"
    assert tok.token_surface(BOS_ID) == "<bos>"
    assert tok.token_surface(EOS_ID) == "<eos>"
    assert tok.token_surface(97 + 3) == "a"
    assert tok.token_surface(255 + 3) == "\xff"
    with pytest.raises(InvalidArgument):
        tok.token_surface(259)
    with pytest.raises(InvalidArgument):
        tok.token_surface(-1)


# -- word tokenizer --------------------------------------------------------------


def test_word_encode_decode():
    tok = WordTokenizer(["red", "blue", "circle"])
    assert tok.vocab_size == 6
    ids = tok.encode("red circle")
    assert ids.tolist() == [BOS_ID, 3, 5, EOS_ID]
    assert tok.decode(ids) == "red circle"


def test_word_duplicate_vocab_rejected():
    with pytest.raises(DataFormatError):
        WordTokenizer(["red", "blue", "red"])


def test_word_unknown_word_rejected():
    tok = WordTokenizer(["red", "blue"])
    with pytest.raises(DataFormatError, match="green"):
        tok.encode("red green")


def test_word_token_surface():
    tok = WordTokenizer(["red", "blue"])
    assert tok.token_surface(3) == "red"
    assert tok.token_surface(EOS_ID) == "<eos>"
    with pytest.raises(InvalidArgument):
        tok.token_surface(5)


def test_word_from_file(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("red\n\nblue\ncircle\n", encoding="utf-8")
    tok = WordTokenizer.from_file(str(path))
    assert tok.words == ["red", "blue", "circle"]


def test_word_from_missing_file():
    with pytest.raises(DataFormatError):
        WordTokenizer.from_file("/nonexistent/vocab.txt")


def test_load_tokenizer_dispatch(tmp_path):
    assert isinstance(load_tokenizer(None), ByteTokenizer)
    path = tmp_path / "v.txt"
    path.write_text("a\nb\n", encoding="utf-8")
    assert isinstance(load_tokenizer(str(path)), WordTokenizer)


# -- embeddings container --------------------------------------------------------


def test_embeddings_roundtrip(tmp_path):
    path = str(tmp_path / "e.gfem")
    mat = np.random.default_rng(3).normal(size=(7, 5)).astype(np.float32)
    write_embeddings(path, mat)
    np.testing.assert_array_equal(read_embeddings(path), mat)


def test_embeddings_write_read_write_identical(tmp_path):
    a = str(tmp_path / "a.gfem")
    b = str(tmp_path / "b.gfem")
    mat = np.random.default_rng(4).normal(size=(3, 9)).astype(np.float32)
    write_embeddings(a, mat)
    write_embeddings(b, read_embeddings(a))
    assert open(a, "rb").read() == open(b, "rb").read()


def test_embeddings_empty_count(tmp_path):
    path = str(tmp_path / "e.gfem")
    write_embeddings(path, np.zeros((0, 5), dtype=np.float32))
    out = read_embeddings(path)
    assert out.shape == (0, 5)


def test_embeddings_casts_to_f32(tmp_path):
    path = str(tmp_path / "e.gfem")
    mat = np.random.default_rng(5).normal(size=(2, 3))
    write_embeddings(path, mat)
    out = read_embeddings(path)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, mat.astype(np.float32))


def test_embeddings_rejects_1d():
    with pytest.raises(InvalidArgument):
        write_embeddings("/tmp/never-written.gfem", np.zeros(5))


def test_embeddings_truncated(tmp_path):
    path = str(tmp_path / "e.gfem")
    write_embeddings(path, np.ones((2, 2), dtype=np.float32))
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-4])
    with pytest.raises(DataFormatError, match="length"):
        read_embeddings(path)


def test_embeddings_trailing_bytes(tmp_path):
    path = str(tmp_path / "e.gfem")
    write_embeddings(path, np.ones((2, 2), dtype=np.float32))
    with open(path, "ab") as f:
        f.write(b"\x00")
    with pytest.raises(DataFormatError, match="length"):
        read_embeddings(path)


def test_embeddings_bad_magic(tmp_path):
    path = tmp_path / "e.gfem"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(DataFormatError, match="not an embeddings file"):
        read_embeddings(str(path))


def test_embeddings_bad_version(tmp_path):
    path = tmp_path / "e.gfem"
    path.write_bytes(b"GFEM" + struct.pack("<III", 99, 0, 0))
    with pytest.raises(DataFormatError, match="version"):
        read_embeddings(str(path))


def test_embeddings_missing_file():
    with pytest.raises(DataFormatError, match="not found"):
        read_embeddings("/nonexistent/e.gfem")


# -- checkpoint container --------------------------------------------------------


def _sample_blocks():
    rng = np.random.default_rng(11)
    return {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "opt.m.w": rng.normal(size=(3, 4)).astype(np.float64),
        "scalar": np.float64(0.25),
        "cube": rng.normal(size=(2, 2, 2)).astype(np.float32),
    }


def test_checkpoint_roundtrip(tmp_path):
    path = str(tmp_path / "c.gfck")
    manifest = {"seed": 7, "nested": {"a": [1, 2], "b": "x"}}
    blocks = _sample_blocks()
    write_checkpoint(path, manifest, blocks)
    got_manifest, got_blocks = read_checkpoint(path)
    assert got_manifest == manifest
    assert set(got_blocks) == set(blocks)
    for name, arr in blocks.items():
        got = got_blocks[name]
        assert got.dtype.itemsize == np.asarray(arr).dtype.itemsize
        np.testing.assert_array_equal(got, np.asarray(arr))


def test_checkpoint_write_read_write_identical(tmp_path):
    a = str(tmp_path / "a.gfck")
    b = str(tmp_path / "b.gfck")
    write_checkpoint(a, {"k": 1}, _sample_blocks())
    manifest, blocks = read_checkpoint(a)
    write_checkpoint(b, manifest, blocks)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_checkpoint_empty_blocks(tmp_path):
    path = str(tmp_path / "c.gfck")
    write_checkpoint(path, {"only": "manifest"}, {})
    manifest, blocks = read_checkpoint(path)
    assert manifest == {"only": "manifest"} and blocks == {}


def test_checkpoint_truncated(tmp_path):
    path = str(tmp_path / "c.gfck")
    write_checkpoint(path, {"k": 1}, _sample_blocks())
    blob = open(path, "rb").read()
    for cut in (len(blob) - 1, len(blob) // 2, 6):
        open(path, "wb").write(blob[:cut])
        with pytest.raises(DataFormatError, match="truncated"):
            read_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    path = str(tmp_path / "c.gfck")
    write_checkpoint(path, {"k": 1}, _sample_blocks())
    with open(path, "ab") as f:
        f.write(b"zz")
    with pytest.raises(DataFormatError, match="trailing"):
        read_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "c.gfck"
    path.write_bytes(b"XXXX" + b"\x00" * 20)
    with pytest.raises(DataFormatError, match="not a checkpoint"):
        read_checkpoint(str(path))


def test_checkpoint_bad_manifest_json(tmp_path):
    path = tmp_path / "c.gfck"
    path.write_bytes(b"GFCK" + struct.pack("<I", 1) + struct.pack("<Q", 3)
                     + b"{{{" + struct.pack("<I", 0))
    with pytest.raises(DataFormatError, match="JSON"):
        read_checkpoint(str(path))


def test_checkpoint_bad_itemsize(tmp_path):
    name = b"w"
    payload = (b"GFCK" + struct.pack("<I", 1) + struct.pack("<Q", 2) + b"{}"
               + struct.pack("<I", 1) + struct.pack("<I", len(name)) + name
               + struct.pack("<B", 2) + struct.pack("<I", 0))
    path = tmp_path / "c.gfck"
    path.write_bytes(payload)
    with pytest.raises(DataFormatError, match="itemsize"):
        read_checkpoint(str(path))


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(InvalidArgument, match="dtype"):
        write_checkpoint(str(tmp_path / "c.gfck"), {},
                         {"w": np.zeros(3, dtype=np.float16)})


def test_checkpoint_missing_file():
    with pytest.raises(DataFormatError, match="not found"):
        read_checkpoint("/nonexistent/c.gfck")


def test_atomic_write_leaves_no_tmp(tmp_path):
    write_embeddings(str(tmp_path / "e.gfem"), np.ones((1, 1), dtype=np.float32))
    write_checkpoint(str(tmp_path / "c.gfck"), {}, {})
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["c.gfck", "e.gfem"]


# -- config ----------------------------------------------------------------------


def test_config_defaults_roundtrip():
    cfg = RunConfig()
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg


def test_config_from_empty_dict():
    cfg = config_from_dict({})
    assert cfg.model.d_model == 768
    assert cfg.training.strategy == "alternating"
    assert cfg.data.validation_fraction == 0.1


def test_config_unknown_top_level_key():
    with pytest.raises(InvalidArgument, match="extra"):
        config_from_dict({"extra": {}})


@pytest.mark.parametrize("section", ["model", "training", "data"])
def test_config_unknown_section_key(section):
    with pytest.raises(InvalidArgument, match=section):
        config_from_dict({section: {"no_such_field": 1}})


def test_config_tie_resolution():
    assert ModelConfig(objective="ntp").tie_output_weights is False
    assert ModelConfig(objective="ntp_lcg").tie_output_weights is True
    assert ModelConfig(objective="ntp_lcg", tie_output_weights=False).tie_output_weights is False


@pytest.mark.parametrize("kw", [
    {"d_model": 10, "n_heads": 4},
    {"d_model": 0},
    {"vocab_size": 3},
    {"max_seq_len": 1},
    {"dropout_rate": 1.0},
    {"dropout_rate": -0.1},
    {"gate_variant": "mystery"},
    {"enhancement": "mystery"},
    {"objective": "mystery"},
    {"image_encoder_kind": "mystery"},
])
def test_model_config_validation(kw):
    with pytest.raises(InvalidArgument):
        ModelConfig(**kw)


@pytest.mark.parametrize("kw", [
    {"batch_size": 0},
    {"strategy": "mystery"},
    {"start_modality": "audio"},
    {"precision": "f16"},
    {"tau_anneal_domain": "weekly"},
    {"tau_anneal_fraction": 0.0},
    {"tau_anneal_fraction": 1.5},
    {"warmup_fraction": 1.0},
    {"epochs_per_modality": 0},
])
def test_train_config_validation(kw):
    with pytest.raises(InvalidArgument):
        TrainConfig(**kw)


@pytest.mark.parametrize("kw", [
    {"validation_fraction": -0.1},
    {"test_fraction": -0.1},
    {"validation_fraction": 0.5, "test_fraction": 0.5},
])
def test_data_config_validation(kw):
    with pytest.raises(InvalidArgument):
        DataConfig(**kw)


def test_load_config_happy_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": {"d_model": 32, "n_heads": 4},
                                "training": {"seed": 9}}), encoding="utf-8")
    cfg = load_config(str(path))
    assert cfg.model.d_model == 32 and cfg.training.seed == 9


def test_load_config_missing_file():
    with pytest.raises(DataFormatError, match="not found"):
        load_config("/nonexistent/run.json")


def test_load_config_bad_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(DataFormatError, match="JSON"):
        load_config(str(path))


def test_load_config_non_object_root(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(InvalidArgument):
        load_config(str(path))


# -- split file error paths ------------------------------------------------------


def _write_split(tmp_path):
    path = str(tmp_path / "split.txt")
    save_split(path, make_split(20, "text", seed=5))
    return path


def test_load_split_missing_file():
    with pytest.raises(DataFormatError, match="not found"):
        load_split("/nonexistent/split.txt")


def test_load_split_bad_header(tmp_path):
    path = tmp_path / "split.txt"
    path.write_text("just some text\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match="not a split file"):
        load_split(str(path))


def test_load_split_header_missing_seed(tmp_path):
    path = tmp_path / "split.txt"
    path.write_text("# gatefuse-split dataset=text\n[train]\n0\n[validation]\n[test]\n",
                    encoding="utf-8")
    with pytest.raises(DataFormatError, match="seed"):
        load_split(str(path))


def test_load_split_non_integer_line(tmp_path):
    path = _write_split(tmp_path)
    blob = open(path, "r", encoding="utf-8").read().replace("\n0\n", "\nzero\n", 1)
    open(path, "w", encoding="utf-8").write(blob)
    with pytest.raises(DataFormatError, match="bad index line"):
        load_split(path)


def test_load_split_non_integer_seed(tmp_path):
    path = _write_split(tmp_path)
    blob = open(path, "r", encoding="utf-8").read().replace("seed=5", "seed=five")
    open(path, "w", encoding="utf-8").write(blob)
    with pytest.raises(DataFormatError, match="seed"):
        load_split(path)


def test_load_split_index_outside_section(tmp_path):
    path = tmp_path / "split.txt"
    path.write_text("# gatefuse-split dataset=text seed=1\n7\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match="outside"):
        load_split(str(path))


def test_load_split_missing_section(tmp_path):
    path = tmp_path / "split.txt"
    path.write_text("# gatefuse-split dataset=text seed=1\n[train]\n0\n[validation]\n",
                    encoding="utf-8")
    with pytest.raises(DataFormatError, match="test"):
        load_split(str(path))

import numpy as np
import pytest

from conftest import overfit_config, overfit_tag_loss
from dmch.cli import main, read_attention_csv
from dmch.embedding import load_codes
from dmch.model import DMCHModel, read_config
from dmch.synth import generate, read_manifest
from dmch.trainer import ImageCache

TINY = """\
hidden = 8
embed_dim = 4
conv_channels = 4,4
code_bits = 32
batch_size = 4
neg_ratio = 1
max_epochs = 2
stage_epoch_cap = 1
max_decode_len = 6
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.conf").write_text(TINY)
    assert main(["gen-data", "--out", str(root / "data"), "--products", "4",
                 "--images-per-product", "2", "--seed", "1"]) == 0
    assert main(["train", "--config", str(root / "tiny.conf"), "--manifest",
                 str(root / "data/manifest.jsonl"), "--out", str(root / "run")]) == 0
    assert main(["embed", "--checkpoint", str(root / "run/final.ckpt"), "--manifest",
                 str(root / "data/manifest.jsonl"), "--out", str(root / "shop.codes")]) == 0
    return root


def shop_image(work):
    m = read_manifest(work / "data/manifest.jsonl")
    rec = m.shop()[2]
    return rec, m.resolve(rec)


# ---------------------------------------------------------------- pipeline


def test_gen_data_is_idempotent(work, tmp_path):
    before = (work / "data/manifest.jsonl").read_bytes()
    assert main(["gen-data", "--out", str(tmp_path / "again"), "--products", "4",
                 "--images-per-product", "2", "--seed", "1"]) == 0
    assert (tmp_path / "again/manifest.jsonl").read_bytes() == before


def test_train_writes_checkpoints_and_config(work):
    assert (work / "run/final.ckpt").exists() and (work / "run/metrics.tsv").exists()
    assert read_config(work / "run/config.txt") == read_config(work / "tiny.conf")


def test_embed_contract(work, tmp_path, capsys):
    ids, packed, c = load_codes(work / "shop.codes")
    assert len(ids) == 4 and c == 32 and packed.shape == (4, 4)
    assert run(capsys, "embed", "--checkpoint", work / "run/final.ckpt", "--manifest",
               work / "data/manifest.jsonl", "--out", tmp_path / "again.codes")[0] == 0
    assert (tmp_path / "again.codes").read_bytes() == (work / "shop.codes").read_bytes()


def test_embed_matches_in_process_codes(work):
    cfg = read_config(work / "run/config.txt")
    model = DMCHModel.load(work / "run/final.ckpt", cfg)
    m = read_manifest(work / "data/manifest.jsonl")
    _, packed, _, _ = model.infer(ImageCache(m).batch([r.item_id for r in m.shop()]))
    ids, stored, _ = load_codes(work / "shop.codes")
    assert ids == [r.item_id for r in m.shop()]
    np.testing.assert_array_equal(stored, packed)


def test_query_finds_shop_image_itself(work, capsys):
    rec, path = shop_image(work)
    code, out, _ = run(capsys, "query", "--checkpoint", work / "run/final.ckpt", "--codes",
                       work / "shop.codes", "--image", path, "--k", "4")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "rank\titem_id\thamming"
    rows = [l.split("\t") for l in lines[1:5]]
    assert rows[0][0] == "1" and rows[0][2] == "0"
    assert rec.item_id in [r[1] for r in rows if r[2] == "0"]
    assert lines[5].startswith("attributes\t")
    assert run(capsys, "query", "--checkpoint", work / "run/final.ckpt", "--codes",
               work / "shop.codes", "--image", path, "--k", "4")[1] == out


def test_attention_csv_round_trip(work, tmp_path, capsys):
    _, path = shop_image(work)
    assert run(capsys, "query", "--checkpoint", work / "run/final.ckpt", "--codes", work / "shop.codes",
               "--image", path, "--attention-out", tmp_path / "q.csv")[0] == 0
    assert run(capsys, "attn-export", "--checkpoint", work / "run/final.ckpt", "--image", path,
               "--out", tmp_path / "a.csv")[0] == 0
    assert (tmp_path / "q.csv").read_bytes() == (tmp_path / "a.csv").read_bytes()
    steps = read_attention_csv(tmp_path / "a.csv")
    assert [s for s, _, _ in steps] == list(range(1, len(steps) + 1))
    for _, beta, alpha in steps:
        assert alpha.shape == (8, 8)
        assert abs(alpha.sum() - 1.0) < 1e-8 and 0.0 <= beta <= 1.0


def test_eval_retrieval_is_monotone_in_k(work, capsys):
    code, out, _ = run(capsys, "eval-retrieval", "--checkpoint", work / "run/final.ckpt", "--codes",
                       work / "shop.codes", "--manifest", work / "data/manifest.jsonl", "--k", "50,1,10")
    assert code == 0
    rows = [l.split("\t") for l in out.splitlines()[1:]]
    assert [r[0] for r in rows] == ["1", "10", "50"]
    values = [float(r[1]) for r in rows]
    assert values == sorted(values) and values[-1] == 1.0
    assert all(r[2] == "4" for r in rows)


def test_eval_attr_writes_and_rereads_corpus(work, tmp_path, capsys):
    code, out, _ = run(capsys, "eval-attr", "--checkpoint", work / "run/final.ckpt", "--manifest",
                       work / "data/manifest.jsonl", "--corpus", tmp_path / "c.tsv")
    assert code == 0
    assert out.splitlines()[0].split("\t")[:2] == ["B-1", "B-2"]
    assert run(capsys, "eval-attr", "--corpus", tmp_path / "c.tsv")[1] == out


def test_bench_tsv(capsys):
    code, out, _ = run(capsys, "bench", "--db-size", "2000", "--queries", "5", "--repetitions", "2")
    assert code == 0
    lines = out.splitlines()
    assert lines[1].startswith("hamming\t5\t2000\t128") and lines[-1].startswith("speedup\t")


# ---------------------------------------------------------------- exit codes


def test_missing_checkpoint_is_io_error(work, capsys):
    code, _, err = run(capsys, "embed", "--checkpoint", work / "nope.ckpt", "--manifest",
                       work / "data/manifest.jsonl", "--out", work / "x.codes")
    assert code == 5 and "nope.ckpt" in err


def test_unknown_config_key_is_config_error(work, capsys):
    code, _, err = run(capsys, "train", "--config", work / "tiny.conf", "--set", "colour=red",
                       "--manifest", work / "data/manifest.jsonl", "--out", work / "bad")
    assert code == 3 and not (work / "bad").exists()


def test_code_length_mismatch_is_config_error(work, capsys):
    code, _, err = run(capsys, "embed", "--checkpoint", work / "run/final.ckpt", "--code-bits", "64",
                       "--manifest", work / "data/manifest.jsonl", "--out", work / "x.codes")
    assert code == 3 and "(" in err


def test_empty_query_split_is_data_error(work, capsys):
    code, _, _ = run(capsys, "eval-retrieval", "--checkpoint", work / "run/final.ckpt", "--codes",
                     work / "shop.codes", "--manifest", work / "data/manifest.jsonl", "--split", "val")
    assert code == 4


def test_corrupt_code_file_is_data_error(work, tmp_path, capsys):
    (tmp_path / "bad.codes").write_bytes(b"garbage")
    rec, path = shop_image(work)
    code, _, _ = run(capsys, "query", "--checkpoint", work / "run/final.ckpt", "--codes",
                     tmp_path / "bad.codes", "--image", path)
    assert code == 4


# ---------------------------------------------------------------- overfit model


def test_query_on_overfit_model_recovers_attributes(tmp_path, capsys):
    m = generate(2, 1, seed=0, out_dir=tmp_path / "data")
    cfg = overfit_config()
    model = DMCHModel(cfg, seed=0)
    shop = m.shop()
    images = ImageCache(m).batch([r.item_id for r in shop])
    steps, loss = overfit_tag_loss(model, images, [model.vocab.encode(r.attributes) for r in shop])
    assert loss < 0.1
    model.save(tmp_path / "model.ckpt")
    (tmp_path / "config.txt").write_text(cfg.to_text())
    assert run(capsys, "embed", "--checkpoint", tmp_path / "model.ckpt", "--manifest",
               tmp_path / "data/manifest.jsonl", "--out", tmp_path / "shop.codes")[0] == 0
    for rec in shop:
        code, out, _ = run(capsys, "query", "--checkpoint", tmp_path / "model.ckpt", "--codes",
                           tmp_path / "shop.codes", "--image", m.resolve(rec), "--k", "1")
        assert code == 0
        assert out.splitlines()[-1] == "attributes\t" + " ".join(rec.attributes)

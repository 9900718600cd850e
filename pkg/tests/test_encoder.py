import numpy as np

from taxpath.dataset import ProductRecord
from taxpath.encoder import (
    EncoderConfig,
    build_field_vocabs,
    encode,
    encode_batch,
    encode_text,
    field_index,
    title_buckets,
)
from taxpath.util import fnv1a_64


def make_record(**kw):
    fields = dict(
        id="r0",
        title="alpha beta gamma",
        category_name="cat name",
        bu_code="bu01",
        ou_code="ou01",
        system_code="sys0",
        label_path=("A",),
        source="goods_registry",
    )
    fields.update(kw)
    return ProductRecord(**fields)


def test_fnv1a_golden_vectors():
    # published FNV-1a 64-bit reference values
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8


def test_encode_text_empty_is_zero():
    cfg = EncoderConfig(hash_buckets=8, text_dim=4, cat_dim=2)
    table = np.arange(32, dtype=float).reshape(8, 4)
    assert np.array_equal(encode_text("", table, cfg), np.zeros(4))
    assert np.array_equal(encode_text("  !! ", table, cfg), np.zeros(4))


def test_encode_text_single_token_is_its_row():
    cfg = EncoderConfig(hash_buckets=8, text_dim=4, cat_dim=2)
    table = np.arange(32, dtype=float).reshape(8, 4)
    bucket = fnv1a_64("alpha") % 8
    assert np.array_equal(encode_text("Alpha", table, cfg), table[bucket])


def test_encode_text_three_token_mean_by_hand():
    cfg = EncoderConfig(hash_buckets=8, text_dim=4, cat_dim=2)
    rng = np.random.default_rng(0)
    table = rng.normal(size=(8, 4))
    text = "red blue green"
    rows = [table[fnv1a_64(tok) % 8] for tok in ["red", "blue", "green"]]
    expected = (rows[0] + rows[1] + rows[2]) / 3.0
    assert np.allclose(encode_text(text, table, cfg), expected, atol=1e-15)


def vocab_config(records, **kw):
    fields = kw.pop("fields", ("bu_code", "ou_code", "system_code"))
    return EncoderConfig(
        hash_buckets=kw.pop("hash_buckets", 16),
        text_dim=kw.pop("text_dim", 4),
        cat_dim=kw.pop("cat_dim", 3),
        fields=fields,
        field_vocabs=build_field_vocabs(records, fields),
        **kw,
    )


def make_tables(cfg, seed=0):
    rng = np.random.default_rng(seed)
    tables = {"text_table": rng.normal(size=(cfg.hash_buckets, cfg.text_dim))}
    for name in cfg.fields:
        tables[f"field/{name}/table"] = rng.normal(size=(len(cfg.vocab(name)) + 1, cfg.cat_dim))
    return tables


def test_unseen_value_maps_to_unk_slot():
    known = [make_record(bu_code="bu01"), make_record(id="r1", bu_code="bu02")]
    cfg = vocab_config(known)
    tables = make_tables(cfg)
    fv = encode(make_record(bu_code="mystery"), tables, cfg)
    block = fv.routing[: len(cfg.vocab("bu_code")) + 1]
    assert block[-1] == 1.0 and block.sum() == 1.0


def test_routing_blocks_one_hot():
    records = [make_record(bu_code=f"bu{i}", ou_code=f"ou{i % 2}") for i in range(4)]
    cfg = vocab_config(records)
    tables = make_tables(cfg)
    for r in records:
        fv = encode(r, tables, cfg)
        off = 0
        for name in cfg.fields:
            width = len(cfg.vocab(name)) + 1
            assert fv.routing[off : off + width].sum() == 1.0
            off += width


def test_title_change_touches_only_title_block():
    records = [make_record()]
    cfg = vocab_config(records)
    tables = make_tables(cfg)
    a = encode(make_record(title="one thing"), tables, cfg)
    b = encode(make_record(title="another thing entirely"), tables, cfg)
    assert np.array_equal(a.routing, b.routing)
    assert not np.array_equal(a.dense[: cfg.text_dim], b.dense[: cfg.text_dim])
    assert np.array_equal(a.dense[cfg.text_dim :], b.dense[cfg.text_dim :])


def test_encode_compositional_oracle():
    records = [make_record(bu_code="bu01"), make_record(id="r1", bu_code="bu02")]
    fields = ("bu_code", "ou_code")
    cfg = vocab_config(records, fields=fields)
    tables = make_tables(cfg, seed=3)
    r = records[0]
    fv = encode(r, tables, cfg)
    expected = np.concatenate(
        [
            encode_text(r.title, tables["text_table"], cfg),
            encode_text(r.category_name, tables["text_table"], cfg),
            tables["field/bu_code/table"][field_index(cfg, "bu_code", r.bu_code)],
            tables["field/ou_code/table"][field_index(cfg, "ou_code", r.ou_code)],
        ]
    )
    assert np.allclose(fv.dense, expected, atol=1e-15)
    assert fv.dense.shape == (cfg.dense_dim,)
    assert np.isfinite(fv.dense).all()


def test_cpvs_fold_into_title_stream():
    cfg = vocab_config([make_record()])
    plain = make_record()
    with_cpv = make_record(cpvs=(("material", "steel"),))
    pb = title_buckets(plain, cfg.hash_buckets)
    cb = title_buckets(with_cpv, cfg.hash_buckets)
    assert cb.size == pb.size + 1
    assert cb[-1] == fnv1a_64("material=steel") % cfg.hash_buckets


def test_encode_batch_matches_single():
    records = [make_record(id=f"r{i}", title=f"thing number {i}") for i in range(5)]
    cfg = vocab_config(records)
    tables = make_tables(cfg, seed=9)
    batch = encode_batch(records, tables, cfg)
    for i, r in enumerate(records):
        fv = encode(r, tables, cfg)
        assert np.array_equal(batch.dense[i], fv.dense)
        assert np.array_equal(batch.routing[i], fv.routing)


def test_hashing_is_stable():
    # frozen bucket assignments guard cross-platform reproducibility
    buckets = title_buckets(make_record(title="Fully Automatic Washing Machine"), 2048)
    assert buckets.tolist() == [
        fnv1a_64(t) % 2048 for t in ["fully", "automatic", "washing", "machine"]
    ]
    assert buckets.tolist() == [639, 1924, 930, 1646]

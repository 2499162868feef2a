import numpy as np
import pytest

from nam.ingest import (
    IngestError, RatingsRecord, RegistryConfig, build_content_view, build_registry,
    filter_positive, load_movielens_100k, parse_metadata, parse_ratings, parse_sessions,
    write_ratings,
)
from nam.views import DirectViewTable, ViewId


def test_threshold_is_strict():
    recs = [RatingsRecord("u", "1", 3.5), RatingsRecord("u", "2", 4.0),
            RatingsRecord("v", "1", 3.49), RatingsRecord("u", "3", 5.0)]
    assert filter_positive(recs) == {"u": ["2", "3"]}


def test_parse_ratings_header_and_malformed(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("userId,movieId,rating,timestamp\n1,10,4.0,99\n1,11,x,1\n2,10\n2,12,7,1\n"
                 "3,10,3.5,\n")
    res = parse_ratings(p)
    assert [(r.user, r.item, r.rating, r.timestamp) for r in res] == \
        [("1", "10", 4.0, 99), ("3", "10", 3.5, None)]
    assert [ln for ln, _ in res.malformed] == [3, 4, 5]


def test_ratings_reserialization_is_idempotent(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("1,10,4.5,5\n2,3,1.0,6\n")
    first = parse_ratings(p).records
    write_ratings(first, tmp_path / "a.csv")
    second = parse_ratings(tmp_path / "a.csv").records
    write_ratings(second, tmp_path / "b.csv")
    assert first == second
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_parse_sessions(tmp_path):
    p = tmp_path / "s.tsv"
    p.write_text("# comment\ns1\ta,b,c\ns2\t\ns3 no tab\ns4\td\n")
    res = parse_sessions(p)
    assert [r.items for r in res] == [("a", "b", "c"), ("d",)]
    assert res.dropped == 1 and res.malformed[0][0] == 4


def test_parse_metadata(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("id\tgenres\tcat\tyear\n1\tA|B\tx\t1990\n2\t\t\t\n3\tB\ty\t2000\n")
    md = parse_metadata(p, {"id": "id", "genres": "multihot", "cat": "onehot", "year": "scalar"})
    assert md.fields["genres"] == {"1": ("A", "B"), "2": (), "3": ("B",)}
    assert md.fields["cat"] == {"1": ("x",), "3": ("y",)}
    assert md.fields["year"] == {"1": 1990.0, "3": 2000.0}


@pytest.mark.parametrize("body, msg", [
    ("id\tg\textra\n1\tA\t0\n", "unknown columns"),
    ("id\n1\n", "missing columns"),
    ("id\tg\n1\tA\n1\tB\n", "duplicate"),
])
def test_metadata_errors(tmp_path, body, msg):
    p = tmp_path / "m.tsv"
    p.write_text(body)
    with pytest.raises(IngestError, match=msg):
        parse_metadata(p, {"id": "id", "g": "multihot"})


def test_metadata_bad_number(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("id\ty\n1\tabc\n")
    with pytest.raises(IngestError, match="not a number") as exc:
        parse_metadata(p, {"id": "id", "y": "scalar"})
    assert exc.value.lineno == 2


def test_content_views():
    genres = {"1": ("A", "B"), "2": ("A",), "3": ("C",)}
    v = build_content_view("genres", "multihot", genres, min_freq=2)
    assert v.meta["vocabulary"] == ["A"] and np.array_equal(v.rows["3"], [0.0])
    v = build_content_view("cat", "onehot", {"1": ("x",), "2": ("y",)}, min_freq=2)
    assert v.dim == 2
    y = build_content_view("year", "scalar", {"1": 1990.0, "2": 2000.0})
    assert y.rows["1"][0] == -1.0 and y.rows["2"][0] == 1.0


def _metadata(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("id\tgenres\tactors\ttags\tyear\tcategory\n"
                 "1\tA|B\tx\tt1\t1990\tc1\n2\tA\tx|y\tt1|t2\t1995\tc2\n"
                 "3\tB\ty\tt2\t2000\tc1\n")
    return parse_metadata(p, {"id": "id", "genres": "multihot", "actors": "multihot",
                              "tags": "multihot", "year": "scalar", "category": "onehot"})


def test_registry_configurations(tmp_path):
    md = _metadata(tmp_path)
    cf = DirectViewTable(ViewId("cf", "cf"), 2, {"1": [1.0, 0], "2": [0, 1.0]})
    text = tmp_path / "text.tsv"
    text.write_text("1\t0.1\t0.2\n3\t0.3\t0.4\n9\t0.5\t0.6\n")
    movies = build_registry(["1", "2"], md, cf, text,
                            RegistryConfig(("genres", "actors", "tags", "year"), True, 2, 1))
    assert movies.view_names == ["cf", "genres", "actors", "tags", "year", "text"]
    assert movies.catalog == ["1", "2", "3", "9"]
    apps = build_registry(["1", "2"], md, cf, text,
                          RegistryConfig(("tags", "category"), True, 2, 1))
    assert apps.view_names == ["cf", "tags", "category", "text"]
    nocf = build_registry(["1", "2"], md, cf, None, RegistryConfig(("genres",), False, None, 1))
    assert nocf.view_names == ["genres"]


def test_movielens_100k_layout(tmp_path):
    (tmp_path / "u.data").write_text("1\t10\t5\t881250949\n2\t10\t3\t881250950\n")
    flags = ["0"] * 19
    flags[1] = flags[5] = "1"
    (tmp_path / "u.item").write_text(
        "10|Some Film (1995)|01-Jan-1995||http://x|" + "|".join(flags) + "\n", encoding="latin-1")
    ratings, genres, years = load_movielens_100k(tmp_path)
    assert len(ratings) == 2 and ratings.records[0].timestamp == 881250949
    assert genres["10"] == ("Action", "Comedy") and years["10"] == 1995.0

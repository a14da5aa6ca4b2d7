import random
import time

import pytest
from scipy import stats

from psifeed import commgroup
from psifeed.errors import ErrorCode, InputError, ProtocolError
from psifeed.geotoken import TimeMode, TokenSet, multi_res_expand
from psifeed.protocol import (
    ALL_RESOLUTIONS, DescentNextMsg, ErrorMsg, MatchResult, PsiServer, Round1Msg, Round2Msg,
    Round3Msg, SessionStore, Strategy, best_resolution_descent, client_finalize, client_round2,
    run_match, server_init, server_round3,
)

from helpers import random_pair, universe
from oracles import plaintext_intersection

EXACT = 2.0**-20


def ts(tokens, r=8, mode=TimeMode.NONE):
    return TokenSet(frozenset(tokens), r, mode)


def one_shot(server_set, client_set, e=EXACT, seed=0, floor=None, strategy=Strategy.BEST):
    rnd = random.Random(seed)
    floor = server_set.resolution if floor is None else floor
    s, m1 = server_init(server_set, floor, e, rng=rnd)
    c, m2 = client_round2(m1, client_set, strategy, rng=rnd)
    m3 = server_round3(s, m2, rnd)
    return client_finalize(c, m3), (m1, m2, m3)


def test_server_init_shapes():
    srv = ts(["drt2yr7x", "drt2yr7y", "drt2yrzz", "9q8yyk8y"])
    s, m1 = server_init(srv, 6, rng=random.Random(1))
    assert m1.resolutions_offered == [8, 7, 6]
    sizes = [o.set_size for o in m1.offers]
    assert sizes == [4, 3, 2]
    assert sizes == sorted(sizes, reverse=True)
    assert len(m1.session_id) == 16


def test_server_init_empty():
    _, m1 = server_init(ts([]), 6, rng=random.Random(1))
    assert [o.set_size for o in m1.offers] == [0, 0, 0]
    assert all(o.bloom.m >= 8 for o in m1.offers)


def test_server_init_bad_floor():
    with pytest.raises(InputError):
        server_init(ts(["drt2yr7x"]), 9)
    with pytest.raises(InputError):
        server_init(ts(["drt2yr7x"]), 0)


def test_client_resolution_selection():
    _, m1 = server_init(ts(["drt2yr7x"]), 6, rng=random.Random(1))
    c8 = ts(["drt2yr7x", "drt2yr7z"])
    cs, m2 = client_round2(m1, c8, Strategy.BEST, rng=random.Random(2))
    assert m2.resolution_selected == 8 and len(m2.elements) == 2
    with pytest.raises(ProtocolError) as ei:
        client_round2(m1, ts(["drt2y"], r=5), rng=random.Random(2))
    assert ei.value.code is ErrorCode.RESOLUTION_MISMATCH
    cs, m2 = client_round2(m1, ts(["drt2yr7", "drt2yrz"], r=7), Strategy.ALL, rng=random.Random(2))
    assert m2.resolution_selected == ALL_RESOLUTIONS
    assert cs.resolutions == [7, 6]
    # 2 tokens at r=7, 1 at r=6 after dedup
    assert len(m2.elements) == 3
    assert len(set(m2.elements)) == 3


def test_time_mode_mismatch():
    _, m1 = server_init(ts(["drt2yr7x@01"], mode=TimeMode.HOUR_OF_DAY), 8, rng=random.Random(1))
    with pytest.raises(ProtocolError) as ei:
        client_round2(m1, ts(["drt2yr7x"]), rng=random.Random(2))
    assert ei.value.code is ErrorCode.RESOLUTION_MISMATCH


def test_round3_preserves_content_and_size(rng):
    srv = ts(universe(rng, 50))
    s, m1 = server_init(srv, 8, rng=rng)
    _, m2 = client_round2(m1, ts(universe(rng, 30)), rng=rng)
    m3 = server_round3(s, m2, rng)
    assert len(m3.elements) == len(m2.elements)
    assert sorted(m3.elements) == sorted(commgroup.encrypt(x, s.key) for x in m2.elements)


def test_shuffle_rarely_identity():
    rnd = random.Random(99)
    srv = ts(universe(rnd, 10))
    key = commgroup.keygen(rnd)
    s, m1 = server_init(srv, 8, key=key, rng=rnd)
    _, m2 = client_round2(m1, ts(universe(rnd, 10)), rng=rnd)
    unshuffled = [commgroup.encrypt(x, key) for x in m2.elements]
    same = 0
    for seed in range(100):
        m3 = server_round3(s, m2, random.Random(seed))
        same += m3.elements == unshuffled
    assert same <= 1


def test_full_and_no_overlap(rng):
    toks = ts(universe(rng, 300))
    res, _ = one_shot(toks, toks)
    assert res.cardinality_by_resolution == {8: 300}
    other = ts(universe(random.Random(77), 300))
    assert plaintext_intersection(toks.tokens, other.tokens) == 0
    res, _ = one_shot(toks, other)
    assert res.cardinality_by_resolution == {8: 0}


def test_oracle_equivalence_200_tokens():
    rnd = random.Random(2024)
    alphabet = universe(rnd, 600)
    for seed in range(100):
        a = ts(rnd.sample(alphabet, 200))
        b = ts(rnd.sample(alphabet, 200))
        res, _ = one_shot(a, b, seed=seed)
        assert res.cardinality_by_resolution[8] == plaintext_intersection(a.tokens, b.tokens)


def test_all_resolutions_per_level_counts(rng):
    alphabet = universe(rng, 400)
    a, b = random_pair(rng, alphabet, 150)
    res, _ = one_shot(a, b, floor=4, strategy=Strategy.ALL)
    ea, eb = multi_res_expand(a, 4), multi_res_expand(b, 4)
    for r in range(4, 9):
        assert res.cardinality_by_resolution[r] == plaintext_intersection(ea[r].tokens, eb[r].tokens)
    cards = [res.cardinality_by_resolution[r] for r in range(4, 9)]
    # coarser cells can only merge overlaps
    assert cards == sorted(cards, reverse=True)


def test_overcount_bound():
    rnd = random.Random(31)
    alphabet = universe(rnd, 4000)
    e = 0.01
    for seed in range(10):
        a, b = ts(rnd.sample(alphabet, 1000)), ts(rnd.sample(alphabet, 1000))
        true = plaintext_intersection(a.tokens, b.tokens)
        res, _ = one_shot(a, b, e=e, seed=seed)
        got = res.cardinality_by_resolution[8]
        slack = stats.binom.ppf(0.999, len(b) - true, e)
        assert true <= got <= true + slack


def test_tampered_transcript(rng):
    s, m1 = server_init(ts(universe(rng, 20)), 8, rng=rng)
    c, m2 = client_round2(m1, ts(universe(rng, 20)), rng=rng)
    m3 = server_round3(s, m2, rng)
    with pytest.raises(ProtocolError) as ei:
        client_finalize(c, Round3Msg(m3.session_id, m3.elements[:-1]))
    assert ei.value.code is ErrorCode.TAMPERED_TRANSCRIPT
    bad = Round3Msg(m3.session_id, [b"\xff" * 32] + m3.elements[1:])
    with pytest.raises(ProtocolError) as ei:
        client_finalize(c, bad)
    assert ei.value.code is ErrorCode.TAMPERED_TRANSCRIPT


def test_round3_rejects_wrong_session_and_bad_element(rng):
    s, m1 = server_init(ts(universe(rng, 5)), 8, rng=rng)
    _, m2 = client_round2(m1, ts(universe(rng, 5)), rng=rng)
    with pytest.raises(ProtocolError) as ei:
        server_round3(s, Round2Msg(bytes(16), m2.resolution_selected, m2.elements))
    assert ei.value.code is ErrorCode.UNKNOWN_SESSION
    with pytest.raises(ProtocolError) as ei:
        server_round3(s, Round2Msg(m2.session_id, 8, [b"\xff" * 32]))
    assert ei.value.code is ErrorCode.BAD_FRAME
    with pytest.raises(ProtocolError) as ei:
        server_round3(s, Round2Msg(m2.session_id, 3, m2.elements))
    assert ei.value.code is ErrorCode.RESOLUTION_MISMATCH


def test_session_store_expiry():
    now = [0.0]
    store = SessionStore(timeout=300, clock=lambda: now[0])
    s, _ = server_init(ts(["drt2yr7x"]), 8, rng=random.Random(1))
    store.add(s)
    assert store.get(s.session_id) is s
    now[0] = 301
    with pytest.raises(ProtocolError) as ei:
        store.get(s.session_id)
    assert ei.value.code is ErrorCode.SESSION_EXPIRED
    with pytest.raises(ProtocolError) as ei:
        store.get(s.session_id)
    assert ei.value.code is ErrorCode.UNKNOWN_SESSION
    store.add(s)
    now[0] = 1000
    assert store.purge() == 1 and len(store) == 0


def test_payload_roundtrips(rng):
    srv = ts(universe(rng, 40))
    s, m1 = server_init(srv, 5, rng=rng)
    _, m2 = client_round2(m1, ts(universe(rng, 40)), Strategy.ALL, rng=rng)
    m3 = server_round3(s, m2, rng)
    for msg in (m1, m2, m3, ErrorMsg(ErrorCode.SESSION_EXPIRED, "gone"), DescentNextMsg(bytes(range(16)), 5)):
        data = msg.to_bytes()
        back = type(msg).from_bytes(data)
        assert back.to_bytes() == data
    back1 = Round1Msg.from_bytes(m1.to_bytes())
    assert back1.resolutions_offered == m1.resolutions_offered
    assert [o.bloom for o in back1.offers] == [o.bloom for o in m1.offers]


@pytest.mark.parametrize("cls", [Round1Msg, Round2Msg, Round3Msg, ErrorMsg, DescentNextMsg])
def test_payload_truncation(cls, rng):
    s, m1 = server_init(ts(universe(rng, 4)), 8, rng=rng)
    _, m2 = client_round2(m1, ts(universe(rng, 4)), rng=rng)
    samples = {Round1Msg: m1, Round2Msg: m2, Round3Msg: server_round3(s, m2, rng),
               ErrorMsg: ErrorMsg(ErrorCode.INTERNAL, "x"), DescentNextMsg: DescentNextMsg(bytes(16), 4)}
    data = samples[cls].to_bytes()
    with pytest.raises(ProtocolError):
        cls.from_bytes(data[:-1])
    with pytest.raises(ProtocolError):
        cls.from_bytes(data + b"\x00")


def test_match_result_dict_roundtrip():
    m = MatchResult({6: 3, 5: 4}, {8: 10, 7: 9, 6: 8, 5: 5}, Strategy.ALL, None, {6: 7, 5: 6})
    assert MatchResult.from_dict(m.to_dict()) == m


def test_no_plaintext_in_payloads(rng):
    srv = ts(universe(rng, 200))
    res, (m1, m2, m3) = one_shot(srv, srv)
    blob = m1.to_bytes() + m2.to_bytes() + m3.to_bytes()
    for t in srv.tokens:
        assert t.encode() not in blob


# -- descent -----------------------------------------------------------------

def five_only_fixture():
    server = ts(["drt2yr7x", "drt2yr7y", "9q8yyk8y"])
    client = ts(["drt2ybbb", "dr5regw3"])
    return server, client


@pytest.mark.parametrize("rekey", [True, False])
def test_descent_stops_at_five(rekey):
    server, client = five_only_fixture()
    es, ec = multi_res_expand(server, 4), multi_res_expand(client, 4)
    oracle = {r: plaintext_intersection(es[r].tokens, ec[r].tokens) for r in range(4, 9)}
    assert oracle == {8: 0, 7: 0, 6: 0, 5: 1, 4: 1}
    srv = PsiServer(server, r_floor=4, rng=random.Random(5))
    res = best_resolution_descent(srv, client, rng=random.Random(6), rekey=rekey)
    assert res.stop_resolution == 5
    assert res.cardinality_by_resolution == {8: 0, 7: 0, 6: 0, 5: 1}
    assert res.server_set_size_by_resolution == {8: 3, 7: 2, 6: 2, 5: 2, 4: 2}
    # rekeying closes the stale sessions as it goes
    assert len(srv.store) == 1


def test_descent_immediate_and_exhausted():
    server, _ = five_only_fixture()
    srv = PsiServer(server, r_floor=4, rng=random.Random(5))
    res = best_resolution_descent(srv, server, rng=random.Random(6))
    assert res.stop_resolution == 8 and res.cardinality_by_resolution == {8: 3}
    far = ts(["zzzzzzzz", "pppppppp"])
    res = best_resolution_descent(srv, far, rng=random.Random(6))
    assert res.stop_resolution == 4
    assert res.cardinality_by_resolution == {8: 0, 7: 0, 6: 0, 5: 0, 4: 0}


def test_run_match_all_strategy():
    server, client = five_only_fixture()
    srv = PsiServer(server, r_floor=4, rng=random.Random(5))
    res = run_match(srv, client, Strategy.ALL, rng=random.Random(8))
    assert res.cardinality_by_resolution == {8: 0, 7: 0, 6: 0, 5: 1, 4: 1}
    assert res.client_set_size_by_resolution == {8: 2, 7: 2, 6: 2, 5: 2, 4: 2}


def test_psi_server_persistent_key_reused():
    server, client = five_only_fixture()
    key = commgroup.keygen(random.Random(1))
    srv = PsiServer(server, r_floor=6, key=key, rng=random.Random(2))
    a = srv.open()
    b = srv.open()
    assert a.session_id != b.session_id
    assert a.offers[0].bloom == b.offers[0].bloom


def test_psi_server_expired_session():
    server, client = five_only_fixture()
    srv = PsiServer(server, rng=random.Random(2), timeout=0.01)
    m1 = srv.open()
    _, m2 = client_round2(m1, client, rng=random.Random(3))
    time.sleep(0.05)
    with pytest.raises(ProtocolError) as ei:
        srv.exchange(m2)
    assert ei.value.code is ErrorCode.SESSION_EXPIRED

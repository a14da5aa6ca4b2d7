"""``psifeed`` command line."""
from __future__ import annotations

import json
import logging
import random
import sys

import click

from psifeed import commgroup, feedrank, mobsim, net
from psifeed._rng import make_rng
from psifeed.bloom import DEFAULT_FP_RATE
from psifeed.errors import InputError, ProtocolError
from psifeed.geotoken import (
    TimeMode, TokenSet, read_token_file, read_trace_csv, tokenize_trace, write_token_file,
)
from psifeed.protocol import DEFAULT_SESSION_TIMEOUT, Strategy

DEFAULT_RESOLUTION = 6
STRATEGIES = {"best": Strategy.BEST, "all": Strategy.ALL}
time_mode_option = click.option(
    "--time-mode", type=click.Choice([m.value for m in TimeMode]), default=TimeMode.HOUR_OF_DAY.value,
    show_default=True)


def _load_tokens(trace, tokens, resolution, time_mode) -> TokenSet:
    if bool(trace) == bool(tokens):
        raise click.UsageError("give exactly one of --trace or --tokens")
    if tokens:
        return read_token_file(tokens)
    return tokenize_trace(read_trace_csv(trace), resolution, TimeMode(time_mode))


def _key(path):
    return commgroup.SecretKey.load(path) if path else None


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (InputError, ProtocolError, OSError) as exc:
            raise click.ClickException(str(exc)) from exc


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Mobility-overlap feed ranking over private set intersection cardinality."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def keygen(out):
    """Write a persistent secret key (32-byte little-endian scalar, mode 0600)."""
    rng = make_rng()
    commgroup.keygen(None if isinstance(rng, random.SystemRandom) else rng).save(out)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--trace", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--resolution", type=click.IntRange(1, 9), default=DEFAULT_RESOLUTION, show_default=True)
@time_mode_option
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def tokenize(trace, resolution, time_mode, out):
    """Turn a lat,lon,ts CSV into a token file."""
    s = tokenize_trace(read_trace_csv(trace), resolution, TimeMode(time_mode))
    write_token_file(out, s)
    click.echo(f"{len(s)} tokens at r={resolution} -> {out}")


@main.command()
@click.option("--bind", default="127.0.0.1:7878", show_default=True)
@click.option("--trace", type=click.Path(exists=True, dir_okay=False))
@click.option("--tokens", type=click.Path(exists=True, dir_okay=False))
@click.option("--resolution", type=click.IntRange(1, 9), default=DEFAULT_RESOLUTION, show_default=True)
@click.option("--floor", type=click.IntRange(1, 9), default=1, show_default=True)
@click.option("--fp-rate", type=float, default=DEFAULT_FP_RATE, show_default=True)
@time_mode_option
@click.option("--key", type=click.Path(exists=True, dir_okay=False), help="persistent key file")
@click.option("--timeout", type=float, default=DEFAULT_SESSION_TIMEOUT, show_default=True)
def serve(bind, trace, tokens, resolution, floor, fp_rate, time_mode, key, timeout):
    """Answer PSI matches against a prefilled trace."""
    s = _load_tokens(trace, tokens, resolution, time_mode)
    srv = net.serve(bind, s, min(floor, s.resolution), fp_rate, _key(key), make_rng(), timeout)
    click.echo(f"listening on {srv.address} ({len(s)} tokens, r={s.resolution})", err=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()


@main.command()
@click.option("--server", required=True)
@click.option("--trace", type=click.Path(exists=True, dir_okay=False))
@click.option("--tokens", type=click.Path(exists=True, dir_okay=False))
@click.option("--resolution", type=click.IntRange(1, 9), default=DEFAULT_RESOLUTION, show_default=True)
@time_mode_option
@click.option("--strategy", type=click.Choice(sorted(STRATEGIES)), default="best", show_default=True)
@click.option("--no-rekey", is_flag=True, help="reuse one session for every descent step")
@click.option("--key", type=click.Path(exists=True, dir_okay=False), help="persistent key file")
@click.option("--friend-id", default=None, help="label stored with the result")
@click.option("--out", type=click.Path(dir_okay=False), help="append the result to this matches file")
@click.option("--timeout", type=float, default=60.0, show_default=True)
def match(server, trace, tokens, resolution, time_mode, strategy, no_rekey, key, friend_id, out, timeout):
    """Run one match against a server and print the result as JSON."""
    s = _load_tokens(trace, tokens, resolution, time_mode)
    result = net.match_client(server, s, STRATEGIES[strategy], _key(key), make_rng(), rekey=not no_rekey,
                              timeout=timeout)
    fid = friend_id or server
    if out:
        feedrank.append_match(out, fid, result)
    click.echo(json.dumps({"friend_id": fid, **result.to_dict()}))


@main.command()
@click.option("--matches", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--alpha", type=click.FloatRange(min=0), default=feedrank.DEFAULT_ALPHA, show_default=True)
@click.option("--gamma", type=click.FloatRange(0, 1, min_open=True), default=feedrank.DEFAULT_GAMMA,
              show_default=True)
@click.option("--slots", type=click.IntRange(min=0), default=0, help="also sample this many feed slots")
@click.option("--seed", type=int, default=None)
def rank(matches, alpha, gamma, slots, seed):
    """Rank friends from a matches file (CSV to stdout)."""
    scores = [feedrank.score(m, fid, gamma) for fid, m in feedrank.load_matches(matches)]
    d = feedrank.feed_distribution(scores, alpha, gamma)
    click.echo(feedrank.ranking_csv(d, scores), nl=False)
    if slots:
        rng = random.Random(seed) if seed is not None else make_rng()
        for fid in feedrank.sample_feed(d, slots, rng=rng):
            click.echo(f"# slot {fid}")


@main.command()
@click.option("--people", type=click.IntRange(min=2), default=60, show_default=True)
@click.option("--days", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--resolutions", default="3,5,7,8", show_default=True)
@click.option("--protocol", is_flag=True, help="compute intersections through the PSI exchange")
@time_mode_option
@click.option("--out", type=click.Path(dir_okay=False), help="write the CSV report here instead of stdout")
@click.option("--gnuplot", type=click.Path(dir_okay=False), help="also write a gnuplot data file")
def simulate(people, days, seed, resolutions, protocol, time_mode, out, gnuplot):
    """Correlate intersection size with friendship strength on a synthetic cohort."""
    try:
        rs = [int(x) for x in resolutions.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter("comma-separated integers expected", param_hint="--resolutions") from None
    cfg = mobsim.CohortConfig(n_people=people, days=days, seed=seed)
    report = mobsim.validate(cfg, rs, use_protocol=protocol, time_mode=TimeMode(time_mode))
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    else:
        click.echo(report.to_csv(), nl=False)
    if gnuplot:
        with open(gnuplot, "w", encoding="utf-8") as fh:
            fh.write(report.to_gnuplot())


@main.command()
def selftest():
    """Quick end-to-end sanity run on random data."""
    from psifeed.geotoken import encode_geohash

    rng = random.Random(0)
    ok = True

    def check(name, cond):
        nonlocal ok
        ok &= bool(cond)
        click.echo(f"{'PASS' if cond else 'FAIL'} {name}")

    check("geohash vector", encode_geohash(57.64911, 10.40744, 9) == "u4pruydqq")
    e = commgroup.hash_to_group(b"selftest")
    ka, kb = commgroup.keygen(rng), commgroup.keygen(rng)
    check("commutativity", commgroup.encrypt(commgroup.encrypt(e, ka), kb)
          == commgroup.encrypt(commgroup.encrypt(e, kb), ka))
    check("strip inverse", commgroup.strip(commgroup.encrypt(e, ka), ka) == e)
    alphabet = sorted({encode_geohash(rng.uniform(42, 43), rng.uniform(-72, -71), 8) for _ in range(400)})
    a = TokenSet(frozenset(rng.sample(alphabet, 150)), 8, TimeMode.NONE)
    b = TokenSet(frozenset(rng.sample(alphabet, 150)), 8, TimeMode.NONE)
    srv = net.serve("127.0.0.1:0", a, 8, rng=random.Random(1))
    net.start_background(srv)
    try:
        res = net.match_client(srv.address, b, descend=False, rng=random.Random(2))
    finally:
        srv.shutdown()
        srv.server_close()
    check("loopback match equals plaintext intersection",
          res.cardinality_by_resolution[8] == len(a.tokens & b.tokens))
    sys.exit(0 if ok else 1)


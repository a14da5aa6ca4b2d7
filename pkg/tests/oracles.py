"""Independent reference computations the suite checks the package against.

Nothing here imports psifeed.
"""
import itertools
import math

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"


def geohash_bisect(lat, lon, precision):
    # textbook interval halving, longitude first, upper half on >= mid
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    bits = []
    even = True
    while len(bits) < precision * 5:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if lon >= mid:
                bits.append(1)
                lon_lo = mid
            else:
                bits.append(0)
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if lat >= mid:
                bits.append(1)
                lat_lo = mid
            else:
                bits.append(0)
                lat_hi = mid
        even = not even
    out = []
    for i in range(0, len(bits), 5):
        out.append(BASE32[int("".join(map(str, bits[i:i + 5])), 2)])
    return "".join(out)


def r1_cell_by_enumeration(lat, lon):
    # scan the 32 first-level cells (8 lon columns x 4 lat rows)
    for idx, ch in enumerate(BASE32):
        b = [(idx >> (4 - i)) & 1 for i in range(5)]
        lon_col = b[0] * 4 + b[2] * 2 + b[4]
        lat_row = b[1] * 2 + b[3]
        lo_lon = -180 + lon_col * 45
        lo_lat = -90 + lat_row * 45
        if lo_lon <= lon < lo_lon + 45 and lo_lat <= lat < lo_lat + 45:
            return ch
    raise AssertionError("no cell")


def bloom_m(n, e):
    return math.ceil(-n * math.log(e) / (math.log(2) ** 2))


def bloom_k(m, n):
    return max(1, round(m / n * math.log(2)))


def pearson_closed_form(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def plaintext_intersection(a, b):
    return len(set(a) & set(b))


def permutations_count(n):
    return math.factorial(n)


def all_prefixes(token, r_min):
    gh, sep, suffix = token.partition("@")
    return {r: gh[:r] + sep + suffix for r in range(r_min, len(gh) + 1)}


def pairs(n):
    return list(itertools.combinations(range(n), 2))

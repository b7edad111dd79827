"""Seeded synthetic ISP traffic on Abilene- and Geant-shaped backbones.

Demands follow a gravity model modulated by per-node diurnal cycles (shifted
by time zone), a weekend dip, AR(1) log-normal noise and sparse decaying
bursts. They are routed onto links with :func:`route_demands`, link loads get
independent log-normal measurement noise, and a fraction of windows receives
missing cells to exercise the cleaning rule.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .ingestion import DemandSeries, LinkSeries, NetworkTopology, route_demands

ABILENE_NODES = (
    "ATLAM5", "ATLAng", "CHINng", "DNVRng", "HSTNng", "IPLSng",
    "KSCYng", "LOSAng", "NYCMng", "SNVAng", "STTLng", "WASHng",
)
ABILENE_LINKS = (
    ("ATLAM5", "ATLAng"), ("ATLAng", "HSTNng"), ("ATLAng", "IPLSng"), ("ATLAng", "WASHng"),
    ("CHINng", "IPLSng"), ("CHINng", "NYCMng"), ("DNVRng", "KSCYng"), ("DNVRng", "SNVAng"),
    ("DNVRng", "STTLng"), ("HSTNng", "KSCYng"), ("HSTNng", "LOSAng"), ("IPLSng", "KSCYng"),
    ("LOSAng", "SNVAng"), ("NYCMng", "WASHng"), ("SNVAng", "STTLng"),
)
ABILENE_TZ = {
    "ATLAM5": -5, "ATLAng": -5, "CHINng": -6, "DNVRng": -7, "HSTNng": -6, "IPLSng": -5,
    "KSCYng": -6, "LOSAng": -8, "NYCMng": -5, "SNVAng": -8, "STTLng": -8, "WASHng": -5,
}

GEANT_NODES = (
    "at", "be", "ch", "cz", "de", "es", "fr", "gr", "hr", "hu", "ie",
    "il", "it", "lu", "nl", "ny", "pl", "pt", "se", "si", "sk", "uk",
)
GEANT_LINKS = (
    ("at", "ch"), ("at", "de"), ("at", "hu"), ("at", "si"), ("at", "sk"), ("be", "fr"),
    ("be", "nl"), ("be", "lu"), ("ch", "fr"), ("ch", "it"), ("cz", "de"), ("cz", "pl"),
    ("cz", "sk"), ("de", "fr"), ("de", "it"), ("de", "nl"), ("de", "se"), ("de", "ny"),
    ("de", "pl"), ("es", "fr"), ("es", "it"), ("es", "pt"), ("fr", "lu"), ("fr", "uk"),
    ("gr", "it"), ("gr", "de"), ("hr", "hu"), ("hr", "si"), ("hu", "sk"), ("ie", "uk"),
    ("il", "it"), ("il", "nl"), ("nl", "uk"), ("ny", "uk"), ("pt", "uk"), ("se", "uk"),
)
GEANT_TZ = {n: 1 for n in GEANT_NODES} | {"uk": 0, "ie": 0, "pt": 0, "gr": 2, "il": 2, "ny": -5}

# name -> (interval minutes, number of intervals, time zones)
PRESETS = {
    "abilene": (5, 182 * 288),
    "geant": (15, 120 * 96),
}


def _bidirectional(nodes, links) -> NetworkTopology:
    arcs, names = [], []
    for s, t in links:
        arcs += [(s, t), (t, s)]
        names += [f"{s}->{t}", f"{t}->{s}"]
    return NetworkTopology(nodes, tuple(arcs), tuple(names))


def abilene_topology() -> NetworkTopology:
    """12 nodes, 15 bidirectional links -> 30 directed links."""
    return _bidirectional(ABILENE_NODES, ABILENE_LINKS)


def geant_topology() -> NetworkTopology:
    """22 nodes, 36 bidirectional links -> 72 directed links (a plausible layout, not the real one)."""
    return _bidirectional(GEANT_NODES, GEANT_LINKS)


def topology_by_name(name: str) -> NetworkTopology:
    return {"abilene": abilene_topology, "geant": geant_topology}[name]()


def synthetic_demands(topology: NetworkTopology, n_intervals: int, interval_minutes: float,
                      rng: np.random.Generator, tz: dict[str, float] | None = None) -> DemandSeries:
    nodes = topology.nodes
    n = len(nodes)
    tz_arr = np.array([(tz or {}).get(v, 0.0) for v in nodes])
    mass = rng.lognormal(0.0, 0.8, n)
    base = np.outer(mass, mass)
    np.fill_diagonal(base, 0.0)
    base *= 100.0 / base.sum() * n

    hours = np.arange(n_intervals) * interval_minutes / 60.0
    local = hours[:, None] + tz_arr[None, :]
    amp = rng.uniform(0.4, 0.7, n)
    diurnal = 1.0 + amp * np.sin(2 * np.pi * (local - 10.0) / 24.0)
    weekend = ((local // 24) % 7 >= 5).astype(float)
    activity = diurnal * (1.0 - 0.3 * weekend)
    od_activity = np.sqrt(activity[:, :, None] * activity[:, None, :])

    pairs = n * n
    rho = 0.98 ** (interval_minutes / 5.0)
    shocks = rng.normal(0.0, 0.1 * np.sqrt(1 - rho**2), size=(pairs, n_intervals))
    noise = lfilter([1.0], [1.0, -rho], shocks, axis=1).T.reshape(n_intervals, n, n)

    bursts = (rng.random((pairs, n_intervals)) < 2e-4) * rng.pareto(2.5, (pairs, n_intervals))
    bursts = lfilter([1.0], [1.0, -0.7], bursts, axis=1).T.reshape(n_intervals, n, n)

    demand = base[None] * od_activity * np.exp(noise) * (1.0 + bursts)
    demand[:, np.arange(n), np.arange(n)] = 0.0
    return DemandSeries(nodes, demand, [None] * n_intervals)


def punch_holes(series: LinkSeries, d: int, fraction: float, rng: np.random.Generator) -> LinkSeries:
    """Blank a random run of cells inside roughly ``fraction`` of the length-``d`` windows."""
    values, mask = series.values.copy(), series.mask.copy()
    n_links, n_t = values.shape
    for w in np.flatnonzero(rng.random(n_t // d) < fraction):
        length = int(rng.integers(1, d + 1))
        start = w * d + int(rng.integers(0, d - length + 1))
        links = rng.random(n_links) < rng.uniform(0.05, 1.0)
        links[rng.integers(n_links)] = True
        mask[links, start : start + length] = True
    values[mask] = np.nan
    return LinkSeries(values, mask, series.link_names, series.interval_seconds)


def synthetic_link_series(name: str = "abilene", seed: int = 0, n_intervals: int | None = None,
                          missing_fraction: float = 0.08, d: int = 10, link_noise: float = 0.05):
    """(topology, LinkSeries) for a named preset; ``n_intervals`` overrides its length.

    ``link_noise`` is the log-scale standard deviation of independent
    per-link, per-interval measurement noise applied after routing.
    """
    minutes, default_len = PRESETS[name]
    topology = topology_by_name(name)
    rng = np.random.default_rng(seed)
    tz = ABILENE_TZ if name == "abilene" else GEANT_TZ
    demands = synthetic_demands(topology, n_intervals or default_len, minutes, rng, tz)
    series = route_demands(topology, demands)
    series.interval_seconds = minutes * 60.0
    if link_noise > 0:
        series.values *= np.exp(rng.normal(0.0, link_noise, series.values.shape))
    if missing_fraction > 0:
        series = punch_holes(series, d, missing_fraction, rng)
    return topology, series

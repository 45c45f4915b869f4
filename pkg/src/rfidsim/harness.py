"""Scenario configuration, the simulation entry points, and metrics.

A scenario is a JSON-shaped config: reader mode, band count, link rate,
power, tag population, impairment toggles, fidelity, and one master seed.
run_scenario drives the engine and reduces its event stream to the
standard metrics (throughput, read rate, identifier reception ratio,
per-band breakdown); sweep repeats a scenario across one swept parameter
with shared derived seeds so comparisons are paired.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import impairments, phy, tag as tag_mod
from .bands import BandPlan, make_band_plan
from .iq import dbm_to_watts
from .phy import FrameKind
from .reader import EventKind, ReadEvent, events_to_csv

READER_MODES = ("quin", "tdma_baseline", "fliptracer_baseline")
FIDELITIES = ("fast_per_band", "composite")
EIRP_CAP_DBM = 36.0
SWEEP_PARAMETERS = ("distance", "tag_count", "blf", "cfo", "n_bands", "dpd")

# calibration defaults echoed in every report
CALIBRATION = {
    "s_min": tag_mod.S_MIN_DEFAULT,
    "k_t_w_per_hz": tag_mod.K_T_DEFAULT_W_PER_HZ,
    "b_signal_hz": tag_mod.B_SIGNAL_DEFAULT_HZ,
    "b_noise_narrow_hz": tag_mod.B_NOISE_NARROW_HZ,
    "b_noise_wide_hz": tag_mod.B_NOISE_WIDE_HZ,
    "power_up_dbm": tag_mod.POWER_UP_DBM,
    "backscatter_mod_loss_db": tag_mod.BACKSCATTER_MOD_LOSS_DB,
    "composite_rate_hz": 32e6,
    "per_band_rate_hz": 6.4e6,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PopulationSpec:
    quin_per_band: int = 0
    conventional: int = 0
    distance_m: float = 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    reader_mode: str = "quin"
    n_bands: int = 5
    eirp_dbm: float = 36.0
    blf_hz: float = 80e3
    duration_s: float = 2.0
    q_override: int | None = None
    dpd: bool = False
    pa_nonlinear: bool = False
    cfo_hz: float = 0.0
    fidelity: str = "fast_per_band"
    master_seed: int = 1
    population: PopulationSpec = field(default_factory=PopulationSpec)
    tags: tuple = ()              # explicit descriptors override population
    downlink_sync: bool = False
    modulation_depth: float = 0.99
    tx_rx_isolation_db: float = 50.0
    noise_psd_w_per_hz: float = 4.0e-18
    span_low_hz: float = 902e6
    span_high_hz: float = 928e6
    passband_hz: float = 1.6e6

    def __post_init__(self):
        if self.reader_mode not in READER_MODES:
            raise ConfigError(f"reader_mode must be one of {READER_MODES}")
        if self.fidelity not in FIDELITIES:
            raise ConfigError(f"fidelity must be one of {FIDELITIES}")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.eirp_dbm > EIRP_CAP_DBM + 1e-9:
            raise ConfigError(f"eirp_dbm exceeds the {EIRP_CAP_DBM} dBm cap")
        if self.blf_hz not in phy.VALID_BLF_HZ:
            raise ConfigError(f"blf_hz must be one of {phy.VALID_BLF_HZ}")
        if self.q_override is not None and not 0 <= self.q_override <= 15:
            raise ConfigError("q_override must be in [0, 15]")
        if self.n_bands < 1:
            raise ConfigError("n_bands must be >= 1")
        for t in self.tags:
            if t.get("band_index") is not None and t["band_index"] >= self.effective_bands():
                raise ConfigError(f"tag band index {t['band_index']} beyond the plan")

    def effective_bands(self) -> int:
        return self.n_bands if self.reader_mode == "quin" else 1

    def band_plan(self) -> BandPlan:
        return make_band_plan(
            self.effective_bands(), self.span_low_hz, self.span_high_hz, self.passband_hz
        )

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        payload = dict(data)
        if "population" in payload and isinstance(payload["population"], dict):
            pop_known = {f.name for f in fields(PopulationSpec)}
            pop_unknown = set(payload["population"]) - pop_known
            if pop_unknown:
                raise ConfigError(f"unknown population keys: {sorted(pop_unknown)}")
            payload["population"] = PopulationSpec(**payload["population"])
        if "tags" in payload:
            payload["tags"] = tuple(payload["tags"])
        return cls(**payload)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "population":
                value = {
                    "quin_per_band": value.quin_per_band,
                    "conventional": value.conventional,
                    "distance_m": value.distance_m,
                }
            elif f.name == "tags":
                value = list(value)
            out[f.name] = value
        return out


def build_population(cfg: ScenarioConfig, plan: BandPlan) -> list[tag_mod.TagInstance]:
    """Materialize tag instances for a scenario.

    Explicit tag descriptors win; otherwise the population spec generates
    quin_per_band narrowband tags per band plus the conventional tags.
    Baseline modes read conventional tags, so the narrowband allotment is
    materialized as wideband tags there (same count, distances, seeds).
    """
    descriptors: list[dict] = []
    if cfg.tags:
        descriptors = [dict(t) for t in cfg.tags]
    else:
        pop = cfg.population
        n_bands = cfg.n_bands
        for b in range(n_bands):
            for i in range(pop.quin_per_band):
                descriptors.append(
                    {
                        "kind": "quin",
                        "band_index": b,
                        "distance_m": pop.distance_m,
                        "rng_seed": _derived_seed(cfg.master_seed, 0x7A6, b, i),
                        "epc_hex": _derived_epc(cfg.master_seed, b, i),
                    }
                )
        for i in range(pop.conventional):
            descriptors.append(
                {
                    "kind": "conv",
                    "band_index": None,
                    "distance_m": pop.distance_m,
                    "rng_seed": _derived_seed(cfg.master_seed, 0xC0F, 0, i),
                    "epc_hex": _derived_epc(cfg.master_seed, 97, i),
                }
            )
    tags = []
    for d in descriptors:
        kind_text = d["kind"] if isinstance(d["kind"], str) else d["kind"].value
        narrow = kind_text == "quin"
        if cfg.reader_mode != "quin" and narrow:
            # baselines interrogate conventional tags of the same layout
            narrow = False
        if narrow:
            band = d["band_index"] % plan.n_bands
            tags.append(
                tag_mod.make_tag(
                    d["epc_hex"],
                    tag_mod.TagKind.NARROWBAND,
                    d["distance_m"],
                    d["rng_seed"],
                    band_index=band,
                    saw_center_hz=plan.bands[band].center_hz,
                )
            )
        else:
            tags.append(
                tag_mod.make_tag(
                    d["epc_hex"], tag_mod.TagKind.WIDEBAND, d["distance_m"], d["rng_seed"]
                )
            )
    return tags


def _derived_seed(master: int, purpose: int, a: int, b: int) -> int:
    rng = np.random.default_rng([master & 0x7FFFFFFFFFFFFFFF, purpose, a, b])
    return int(rng.integers(0, 2**63))


def _derived_epc(master: int, a: int, b: int) -> str:
    rng = np.random.default_rng([master & 0x7FFFFFFFFFFFFFFF, 0xE9C, a, b])
    return "".join(f"{rng.integers(0, 16):X}" for _ in range(24))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    duration_s: float
    n_bands: int
    throughput_pkts_per_s: float
    read_rate_per_s: float
    err: float
    per_band_read_rate: tuple
    per_band_throughput: tuple
    per_band_crc_errors: tuple
    conventional_excitations: int
    conventional_misreads: int
    duplicates_flagged: int
    duplicate_acks: int
    rounds: int
    config_echo: dict

    def to_csv(self) -> str:
        rows = ["metric,band,value"]
        rows.append(f"throughput_pkts_per_s,all,{self.throughput_pkts_per_s!r}")
        rows.append(f"read_rate_per_s,all,{self.read_rate_per_s!r}")
        rows.append(f"err,all,{self.err!r}")
        for b in range(self.n_bands):
            rows.append(f"read_rate_per_s,{b},{self.per_band_read_rate[b]!r}")
            rows.append(f"throughput_pkts_per_s,{b},{self.per_band_throughput[b]!r}")
            rows.append(f"crc_errors,{b},{self.per_band_crc_errors[b]!r}")
        rows.append(f"conventional_excitations,all,{self.conventional_excitations}")
        rows.append(f"conventional_misreads,all,{self.conventional_misreads}")
        rows.append(f"duplicates_flagged,all,{self.duplicates_flagged}")
        rows.append(f"duplicate_acks,all,{self.duplicate_acks}")
        rows.append(f"rounds,all,{self.rounds}")
        return "\n".join(rows) + "\n"

    def to_text(self) -> str:
        lines = ["# scenario report"]
        for key, value in sorted(self.config_echo.items()):
            lines.append(f"# {key} = {value}")
        lines.append(self.to_csv().rstrip("\n"))
        return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> dict:
    """Reparse the CSV form; numeric fields reproduce exactly (repr round trip)."""
    out = {}
    lines = text.strip().split("\n")
    for line in lines[1:]:
        metric, band, value = line.split(",")
        out[(metric, band)] = float(value)
    return out


def run_scenario(cfg: ScenarioConfig) -> MetricsReport:
    """Simulate one scenario and reduce its events to a metrics report."""
    from .engine import Engine

    engine = Engine(cfg).run()
    return summarize(engine)


def summarize(engine) -> MetricsReport:
    cfg = engine.cfg
    duration = cfg.duration_s
    k = engine.k
    per_band_epc = [0] * k
    per_band_pkts = [0] * k
    per_band_crc = [0] * k
    duplicates = 0
    conv_epcs = {engine.tags[i].epc_hex for i in engine.conv_tags}
    misreads = 0
    for e in engine.events:
        if e.kind in (EventKind.RN16, EventKind.EPC, EventKind.CRC_ERROR):
            per_band_pkts[e.band_index] += 1
        if e.kind is EventKind.EPC:
            per_band_epc[e.band_index] += 1
            if cfg.reader_mode == "quin" and e.epc_hex in conv_epcs:
                misreads += 1
        elif e.kind is EventKind.CRC_ERROR:
            per_band_crc[e.band_index] += 1
        if e.duplicate:
            duplicates += 1
    epc_total = sum(per_band_epc)
    crc_total = sum(per_band_crc)
    err = epc_total / (epc_total + crc_total) if (epc_total + crc_total) else 0.0
    echo = dict(CALIBRATION)
    echo.update(cfg.to_dict())
    echo["q_values"] = list(engine.q_values)
    echo["tx_amp_per_band_w"] = engine.tx_amp**2
    return MetricsReport(
        duration_s=duration,
        n_bands=k,
        throughput_pkts_per_s=sum(per_band_pkts) / duration,
        read_rate_per_s=epc_total / duration,
        err=err,
        per_band_read_rate=tuple(v / duration for v in per_band_epc),
        per_band_throughput=tuple(v / duration for v in per_band_pkts),
        per_band_crc_errors=tuple(per_band_crc),
        conventional_excitations=len(engine.excitations),
        conventional_misreads=misreads,
        duplicates_flagged=duplicates,
        duplicate_acks=engine.duplicate_acks,
        rounds=sum(r.session.stats.rounds for r in engine._runners),
        config_echo=echo,
    )


def sweep(cfg: ScenarioConfig, parameter: str, values) -> list[MetricsReport]:
    """One run per value; derived seeds are shared across points."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; use one of {SWEEP_PARAMETERS}")
    reports = []
    for value in values:
        reports.append(run_scenario(_apply_parameter(cfg, parameter, value)))
    return reports


def _apply_parameter(cfg: ScenarioConfig, parameter: str, value) -> ScenarioConfig:
    if parameter == "distance":
        pop = replace(cfg.population, distance_m=float(value))
        return replace(cfg, population=pop)
    if parameter == "tag_count":
        pop = replace(cfg.population, quin_per_band=int(value))
        return replace(cfg, population=pop)
    if parameter == "blf":
        return replace(cfg, blf_hz=float(value))
    if parameter == "cfo":
        return replace(cfg, cfo_hz=float(value))
    if parameter == "n_bands":
        return replace(cfg, n_bands=int(value))
    if parameter == "dpd":
        return replace(cfg, dpd=bool(value))
    raise ConfigError(parameter)


def emit_report(report: MetricsReport, fmt: str, path: str) -> None:
    if fmt not in ("csv", "text"):
        raise ConfigError("format must be csv or text")
    payload = report.to_csv() if fmt == "csv" else report.to_text()
    with open(path, "w", encoding="ascii") as fh:
        fh.write(payload)


def write_event_log(events: list[ReadEvent], path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(events_to_csv(events))


# ---------------------------------------------------------------------------
# Analysis helpers used by acceptance checks
# ---------------------------------------------------------------------------

def downlink_decodable(
    kind: tag_mod.TagKind,
    distance_m: float,
    tx_power_dbm: float,
    deafen_db: float = 0.0,
    frequency_hz: float = 915e6,
) -> bool:
    """Can a tag at this distance power up and decode the downlink?

    Uses the tag module's actual gates: path loss, the band filter's
    insertion loss for narrowband tags, the power-up threshold, and the
    minimum-detectable-power law.  `deafen_db` models reduced reader power.
    """
    incident_dbm = tx_power_dbm - deafen_db - impairments.path_loss_db(distance_m, frequency_hz)
    incident_w = dbm_to_watts(incident_dbm)
    if kind is tag_mod.TagKind.NARROWBAND:
        spec = tag_mod.SawFilterSpec(center_hz=frequency_hz)
        chip_w = incident_w * abs(tag_mod.saw_gain(spec, frequency_hz)) ** 2
        fe = tag_mod.ChipFrontEnd(b_noise_hz=tag_mod.B_NOISE_NARROW_HZ)
    else:
        chip_w = incident_w
        fe = tag_mod.ChipFrontEnd(b_noise_hz=tag_mod.B_NOISE_WIDE_HZ)
    if chip_w < fe.power_up_threshold_w:
        return False
    return chip_w >= tag_mod.min_detectable_power(fe)


def downlink_range_m(kind: tag_mod.TagKind, tx_power_dbm: float, deafen_db: float = 0.0) -> float:
    """Largest decodable distance by bisection on the decode gates."""
    lo, hi = 0.05, 200.0
    if not downlink_decodable(kind, lo, tx_power_dbm, deafen_db):
        return 0.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if downlink_decodable(kind, mid, tx_power_dbm, deafen_db):
            lo = mid
        else:
            hi = mid
    return lo


def protocol_math_read_rate_bound(cfg: ScenarioConfig) -> float:
    """Upper bound on reads per second from pure slot-timing accounting.

    The fastest possible cycle per identifier read is a QueryRep, the tag
    turnaround, the RN16, the Ack, another turnaround, and the identifier
    packet, with zero empty or collided slots across all bands.
    """
    from .engine import t1_s, t2_s

    timing = phy.default_pie_timing(cfg.blf_hz)
    blf = cfg.blf_hz
    t1 = t1_s(timing, blf)
    qrep = timing.frame_duration_s(phy.frame_query_rep().bits)
    ack = timing.frame_duration_s(phy.frame_ack(0).bits)
    rn16 = (phy.FM0_PREAMBLE_SYMBOLS + 16 + 1) / blf
    epc = (phy.FM0_PREAMBLE_SYMBOLS + 128 + 1) / blf
    cycle = qrep + t1 + rn16 + ack + t1 + epc + t2_s(blf)
    return cfg.effective_bands() / cycle

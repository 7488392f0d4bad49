"""Generate the shipped feeder data files.

Transcribes the public IEEE PES 13-node and 37-node distribution test feeder
data (line configurations in ohms per mile, segment lengths in feet, spot
loads in kW/kvar) into the package's JSON schema, together with modification
scripts and the dual-feeder switching study specs. Run from the repo root:

    python3 scripts/build_data.py

Regenerates src/phasorflow/data/*.json and checks internal consistency
(modification scripts reproduce the directly-authored modified feeders).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from phasorflow import apply_modifications, network_from_dict, network_to_dict, solve_exact

DATA = Path(__file__).resolve().parents[1] / "src" / "phasorflow" / "data"

S_BASE_VA = 3.0e6  # three-phase base; per-phase kW values divide by 3000
KW = 1.0 / 3000.0

BETA_S = 0.85
BETA_Z = 0.15


def cx(re: float, im: float) -> list[float]:
    return [re, im]


def zmat(entries: dict[str, tuple[float, float]], phases: str) -> list[list[list[float]]]:
    """Symmetric impedance matrix from upper-triangle entries keyed 'ab' etc."""
    k = len(phases)
    out = [[None] * k for _ in range(k)]
    for i, p in enumerate(phases):
        for j, q in enumerate(phases):
            key = p + q if p + q in entries else q + p
            r, x = entries[key]
            out[i][j] = cx(r, x)
    return out


# ---------------------------------------------------------------------------
# IEEE 13-node test feeder
# ---------------------------------------------------------------------------

CONFIGS_13 = {
    "601": {
        "phases": "abc",
        "z": zmat(
            {
                "aa": (0.3465, 1.0179), "ab": (0.1560, 0.5017), "ac": (0.1580, 0.4236),
                "bb": (0.3375, 1.0478), "bc": (0.1535, 0.3849), "cc": (0.3414, 1.0348),
            },
            "abc",
        ),
    },
    "602": {
        "phases": "abc",
        "z": zmat(
            {
                "aa": (0.7526, 1.1814), "ab": (0.1580, 0.4236), "ac": (0.1560, 0.5017),
                "bb": (0.7475, 1.1983), "bc": (0.1535, 0.3849), "cc": (0.7436, 1.2112),
            },
            "abc",
        ),
    },
    "603": {
        "phases": "bc",
        "z": zmat(
            {"bb": (1.3294, 1.3471), "bc": (0.2066, 0.4591), "cc": (1.3238, 1.3569)},
            "bc",
        ),
    },
    "604": {
        "phases": "ac",
        "z": zmat(
            {"aa": (1.3238, 1.3569), "ac": (0.2066, 0.4591), "cc": (1.3294, 1.3471)},
            "ac",
        ),
    },
    "605": {"phases": "c", "z": zmat({"cc": (1.3292, 1.3475)}, "c")},
    "606": {
        "phases": "abc",
        "z": zmat(
            {
                "aa": (0.7982, 0.4463), "ab": (0.3192, 0.0328), "ac": (0.2849, -0.0143),
                "bb": (0.7891, 0.4041), "bc": (0.3192, 0.0328), "cc": (0.7982, 0.4463),
            },
            "abc",
        ),
    },
    "607": {"phases": "a", "z": zmat({"aa": (1.3425, 0.5124)}, "a")},
}

NODES_13_RAW = [
    ("source", "abc"), ("650", "abc"), ("rg60", "abc"), ("632", "abc"),
    ("633", "abc"), ("634", "abc"), ("645", "bc"), ("646", "bc"),
    ("671", "abc"), ("680", "abc"), ("684", "ac"), ("611", "c"),
    ("652", "a"), ("692", "abc"), ("675", "abc"),
]

# (from, to, length_ft, config); placeholders use the reserved ideal config.
LINES_13_RAW = [
    ("source", "650", None, "ideal", {"phases": "abc", "name": "source-650"}),
    ("650", "rg60", None, "ideal", {"phases": "abc", "name": "regulator-650"}),
    ("rg60", "632", 2000, "601", {"name": "650-632"}),
    ("632", "633", 500, "602", {}),
    ("633", "634", None, "ideal", {"phases": "abc", "name": "xfm-633-634"}),
    ("632", "645", 500, "603", {}),
    ("645", "646", 300, "603", {}),
    ("632", "671", 2000, "601", {}),
    ("671", "692", None, "ideal", {"phases": "abc", "name": "671-692", "is_switch": True, "closed": True}),
    ("692", "675", 500, "606", {}),
    ("671", "684", 300, "604", {}),
    ("684", "611", 300, "605", {}),
    ("684", "652", 800, "607", {}),
    ("671", "680", 1000, "601", {}),
]

# Spot loads, kW and kvar per phase. Delta-connected entries in the source
# documentation are carried as wye on the documented column phase; the
# 632-671 distributed load is not a spot load and is omitted.
LOADS_13_KW = [
    ("634", "a", 160, 110), ("634", "b", 120, 90), ("634", "c", 120, 90),
    ("645", "b", 170, 125),
    ("646", "b", 230, 132),
    ("652", "a", 128, 86),
    ("671", "a", 385, 220), ("671", "b", 385, 220), ("671", "c", 385, 220),
    ("675", "a", 485, 190), ("675", "b", 68, 60), ("675", "c", 290, 212),
    ("692", "c", 170, 151),
    ("611", "c", 170, 80),
]

CAPS_13_KVAR = [("675", "a", 200), ("675", "b", 200), ("675", "c", 200), ("611", "c", 100)]

MODS_13 = [
    {
        "op": "remove_regulator",
        "line": "regulator-650",
        "comment": "omit the head voltage regulator; the 2000 ft segment then runs 650-632",
    },
    {
        "op": "replace_with_line",
        "line": "xfm-633-634",
        "config": "601",
        "length_ft": 50,
        "comment": "in-feeder transformer replaced by a 50 ft config-601 line",
    },
    {
        "op": "replace_with_line",
        "line": "671-692",
        "config": "601",
        "length_ft": 50,
        "comment": "normally-closed sectionalizing switch replaced by a 50 ft config-601 line",
    },
]


def feeder_13_raw() -> dict:
    return {
        "comment": (
            "IEEE 13-node distribution test feeder (IEEE PES Distribution Test "
            "Feeders), transcribed: line configurations in ohms/mile, segment "
            "lengths in feet, spot loads kW/kvar converted to per-unit on the "
            "3 MVA / 4.16 kV base (kW / 3000). The head regulator, in-feeder "
            "transformer, and sectionalizing switch appear as ideal "
            "placeholder lines. Distributed and delta-connected loads are "
            "carried as wye spot loads on the documented column phase."
        ),
        "name": "ieee13-raw",
        "bases": {"s_base_va": S_BASE_VA, "v_base_v": 4160.0},
        "slack": {"node": "source"},
        "nodes": [{"id": n, "phases": list(p)} for n, p in NODES_13_RAW],
        "line_configs": {
            name: {"phases": list(c["phases"]), "z_ohm_per_mile": c["z"]}
            for name, c in CONFIGS_13.items()
        },
        "lines": [_line_entry(e) for e in LINES_13_RAW],
        "loads": [
            {"node": n, "phase": p, "re": kw * KW, "im": kvar * KW, "beta_S": BETA_S, "beta_Z": BETA_Z}
            for n, p, kw, kvar in LOADS_13_KW
        ],
        "caps": [{"node": n, "phase": p, "q_pu": kvar * KW} for n, p, kvar in CAPS_13_KVAR],
        "der": [],
        "vvc": [],
    }


def _line_entry(e) -> dict:
    frm, to, length, config, extra = e
    out = {"from": frm, "to": to, "config": config}
    if length is not None:
        out["length_ft"] = length
    for k, v in extra.items():
        out[k] = list(v) if k == "phases" else v
    return out


# ---------------------------------------------------------------------------
# IEEE 37-node test feeder
# ---------------------------------------------------------------------------

CONFIGS_37 = {
    "721": {
        "phases": "abc",
        "z": zmat(
            {
                "aa": (0.2926, 0.1973), "ab": (0.0673, -0.0368), "ac": (0.0337, -0.0417),
                "bb": (0.2646, 0.1900), "bc": (0.0673, -0.0368), "cc": (0.2926, 0.1973),
            },
            "abc",
        ),
    },
    "722": {
        "phases": "abc",
        "z": zmat(
            {
                "aa": (0.4751, 0.2973), "ab": (0.1629, -0.0326), "ac": (0.1234, -0.0607),
                "bb": (0.4488, 0.2678), "bc": (0.1629, -0.0326), "cc": (0.4751, 0.2973),
            },
            "abc",
        ),
    },
    "723": {
        "phases": "abc",
        "z": zmat(
            {
                "aa": (1.2936, 0.6713), "ab": (0.4871, 0.2111), "ac": (0.4585, 0.1521),
                "bb": (1.3022, 0.6326), "bc": (0.4871, 0.2111), "cc": (1.2936, 0.6713),
            },
            "abc",
        ),
    },
    "724": {
        "phases": "abc",
        "z": zmat(
            {
                "aa": (2.0952, 0.7758), "ab": (0.5204, 0.2738), "ac": (0.4926, 0.2123),
                "bb": (2.1068, 0.7398), "bc": (0.5204, 0.2738), "cc": (2.0952, 0.7758),
            },
            "abc",
        ),
    },
}

LINES_37_RAW = [
    ("source", "799", None, "ideal", {"phases": "abc", "name": "source-799"}),
    ("799", "rg799", None, "ideal", {"phases": "abc", "name": "regulator-799"}),
    ("rg799", "701", 1850, "721", {"name": "799-701"}),
    ("701", "702", 960, "722", {}),
    ("702", "705", 400, "724", {}),
    ("702", "713", 360, "723", {}),
    ("702", "703", 1320, "722", {}),
    ("703", "727", 240, "724", {}),
    ("703", "730", 600, "723", {}),
    ("704", "714", 80, "724", {}),
    ("704", "720", 800, "723", {}),
    ("705", "742", 320, "724", {}),
    ("705", "712", 240, "724", {}),
    ("706", "725", 280, "724", {}),
    ("707", "724", 760, "724", {}),
    ("707", "722", 120, "724", {}),
    ("708", "733", 320, "723", {}),
    ("708", "732", 320, "724", {}),
    ("709", "731", 600, "723", {}),
    ("709", "708", 320, "723", {}),
    ("710", "735", 200, "724", {}),
    ("710", "736", 1280, "724", {}),
    ("711", "741", 400, "723", {}),
    ("711", "740", 200, "724", {}),
    ("713", "704", 520, "723", {}),
    ("714", "718", 520, "724", {}),
    ("720", "707", 920, "724", {}),
    ("720", "706", 600, "723", {}),
    ("727", "744", 280, "723", {}),
    ("730", "709", 200, "723", {}),
    ("733", "734", 560, "723", {}),
    ("734", "737", 640, "723", {}),
    ("734", "710", 520, "724", {}),
    ("737", "738", 400, "723", {}),
    ("738", "711", 400, "723", {}),
    ("744", "728", 200, "724", {}),
    ("744", "729", 280, "724", {}),
    ("709", "775", None, "ideal", {"phases": "abc", "name": "xfm-709-775"}),
]

LOADS_37_KW = [
    ("701", "a", 140, 70), ("701", "b", 140, 70), ("701", "c", 350, 175),
    ("712", "c", 85, 40),
    ("713", "c", 85, 40),
    ("714", "a", 17, 8), ("714", "b", 21, 10),
    ("718", "a", 85, 40),
    ("720", "c", 85, 40),
    ("722", "b", 140, 70), ("722", "c", 21, 10),
    ("724", "b", 42, 21),
    ("725", "b", 42, 21),
    ("727", "c", 42, 21),
    ("728", "a", 42, 21), ("728", "b", 42, 21), ("728", "c", 42, 21),
    ("729", "a", 42, 21),
    ("730", "c", 85, 40),
    ("731", "b", 85, 40),
    ("732", "c", 42, 21),
    ("733", "a", 85, 40),
    ("734", "c", 42, 21),
    ("735", "c", 85, 40),
    ("736", "b", 42, 21),
    ("737", "a", 140, 70),
    ("738", "a", 126, 62),
    ("740", "c", 85, 40),
    ("741", "c", 42, 21),
    ("742", "a", 8, 4), ("742", "b", 85, 40),
    ("744", "a", 42, 21),
]

MODS_37 = [
    {
        "op": "remove_regulator",
        "line": "regulator-799",
        "comment": "omit the head voltage regulator; the 1850 ft segment then runs 799-701",
    },
    {
        "op": "replace_with_line",
        "line": "xfm-709-775",
        "config": "724",
        "length_ft": 50,
        "comment": "in-feeder transformer replaced by a 50 ft config-724 line",
    },
]


def feeder_37_raw() -> dict:
    node_ids = ["source", "799", "rg799"] + sorted(
        {e[0] for e in LINES_37_RAW[2:]} | {e[1] for e in LINES_37_RAW[2:]} - {"rg799"}
    )
    node_ids = list(dict.fromkeys(node_ids))
    return {
        "comment": (
            "IEEE 37-node distribution test feeder (IEEE PES Distribution Test "
            "Feeders), transcribed: underground line configurations in "
            "ohms/mile, lengths in feet, spot loads kW/kvar converted to "
            "per-unit on the 3 MVA / 4.8 kV base (kW / 3000). Delta-connected "
            "loads are carried as wye on the documented column phase. The head "
            "regulator and in-feeder transformer appear as ideal placeholder "
            "lines."
        ),
        "name": "ieee37-raw",
        "bases": {"s_base_va": S_BASE_VA, "v_base_v": 4800.0},
        "slack": {"node": "source"},
        "nodes": [{"id": n, "phases": ["a", "b", "c"]} for n in node_ids],
        "line_configs": {
            name: {"phases": list(c["phases"]), "z_ohm_per_mile": c["z"]}
            for name, c in CONFIGS_37.items()
        },
        "lines": [_line_entry(e) for e in LINES_37_RAW],
        "loads": [
            {"node": n, "phase": p, "re": kw * KW, "im": kvar * KW, "beta_S": BETA_S, "beta_Z": BETA_Z}
            for n, p, kw, kvar in LOADS_37_KW
        ],
        "caps": [],
        "der": [],
        "vvc": [],
    }


# ---------------------------------------------------------------------------
# Dual-feeder switching study specs
# ---------------------------------------------------------------------------


def spec_13_dual() -> dict:
    vvc_nodes = ["1632", "1680", "2632", "2680"]
    der_nodes = {"1632": "1", "1675": "1", "1684": "1", "2632": "2", "2671": "2"}
    return {
        "comment": (
            "Dual modified IEEE 13-node feeders on a shared infinite bus with "
            "an open tie switch between the 680 nodes; feeder 1 loads scaled "
            "0.75, feeder 2 scaled 1.50, extra wye loads at both 680 nodes."
        ),
        "name": "ieee13-dual",
        "base_feeder": "ieee13_raw.json",
        "shared_mods": "mods_ieee13.json",
        "feeders": [
            {
                "prefix": "1",
                "mods": [
                    {"op": "add_spot_load", "node": "680", "phase": "a", "demand": [0.01, 0.004], "beta_s": BETA_S, "beta_z": BETA_Z},
                    {"op": "add_spot_load", "node": "680", "phase": "b", "demand": [0.01, 0.004], "beta_s": BETA_S, "beta_z": BETA_Z},
                    {"op": "add_spot_load", "node": "680", "phase": "c", "demand": [0.01, 0.004], "beta_s": BETA_S, "beta_z": BETA_Z},
                    {"op": "scale_loads", "factor": 0.75, "include_caps": False},
                ],
            },
            {
                "prefix": "2",
                "mods": [
                    {"op": "add_spot_load", "node": "680", "phase": "a", "demand": [0.01, 0.004], "beta_s": BETA_S, "beta_z": BETA_Z},
                    {"op": "add_spot_load", "node": "680", "phase": "b", "demand": [0.01, 0.004], "beta_s": BETA_S, "beta_z": BETA_Z},
                    {"op": "add_spot_load", "node": "680", "phase": "c", "demand": [0.01, 0.004], "beta_s": BETA_S, "beta_z": BETA_Z},
                    {"op": "scale_loads", "factor": 1.5, "include_caps": False},
                ],
            },
        ],
        "switches": [
            {"from": "1680", "to": "2680", "config": "601", "length_ft": 500, "name": "tie-1680-2680", "closed": False}
        ],
        "der": [{"node": n, "capacity": 0.05} for n in der_nodes],
        "vvc": [
            {"node": n, "q_min": -0.05, "q_max": 0.05, "v_min": 0.95, "v_max": 1.05}
            for n in vvc_nodes
        ],
        "voltage_bounds": {"e_min": 0.9025, "e_max": 1.1025},
        "cases": {
            "NC": None,
            "MC": {"magnitude": 1000.0, "angle": 0.0, "effort": 1.0},
            "PC": {"magnitude": 1000.0, "angle": 1000.0, "effort": 1.0},
        },
        "actions": [{"switch": "tie-1680-2680", "targets": ["1680", "2680"]}],
    }


def spec_37_dual() -> dict:
    der1 = ["1702", "1704", "1724", "1729", "1732", "1735", "1737", "1711"]
    der2 = ["2702", "2704", "2724", "2729", "2735", "2737", "2711"]
    return {
        "comment": (
            "Dual modified IEEE 37-node feeders on a shared infinite bus with "
            "two open tie switches (731 pair then 725 pair); feeder 1 loads "
            "scaled 1.50, feeder 2 scaled 1.75."
        ),
        "name": "ieee37-dual",
        "base_feeder": "ieee37_raw.json",
        "shared_mods": "mods_ieee37.json",
        "feeders": [
            {"prefix": "1", "mods": [{"op": "scale_loads", "factor": 1.5, "include_caps": False}]},
            {"prefix": "2", "mods": [{"op": "scale_loads", "factor": 1.75, "include_caps": False}]},
        ],
        "switches": [
            {"from": "1731", "to": "2731", "config": "722", "length_ft": 3840, "name": "tie-1731-2731", "closed": False},
            {"from": "1725", "to": "2725", "config": "722", "length_ft": 3840, "name": "tie-1725-2725", "closed": False},
        ],
        "der": [{"node": n, "capacity": 0.05} for n in der1 + der2],
        "vvc": [],
        "voltage_bounds": {"e_min": 0.9025, "e_max": 1.1025},
        "cases": {
            "NC": None,
            "PC": {"magnitude": 1000.0, "angle": 1000.0, "effort": 1.0},
        },
        "actions": [
            {"switch": "tie-1731-2731", "targets": ["1731", "2731"]},
            {"switch": "tie-1725-2725", "targets": ["1725", "2725"]},
        ],
    }


# ---------------------------------------------------------------------------


def write(name: str, doc) -> None:
    path = DATA / name
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"wrote {path}")


def build_modified(raw_doc: dict, mods: list, name: str) -> dict:
    """Apply a mod script to a raw document; solve to verify it is sound."""
    raw = network_from_dict(raw_doc)
    net = apply_modifications(raw, mods)
    sol = solve_exact(net)
    vmin = min(abs(v) for v in sol.V.values())
    print(
        f"  {name}: {len(net.nodes)} nodes, {len(net.lines)} lines, "
        f"NR iters {sol.iterations}, residual {sol.residual_norm:.2e}, min |V| {vmin:.4f}"
    )
    doc = network_to_dict(net)
    doc["name"] = name
    doc = {
        "comment": f"derived from {raw_doc['name']} by applying the study modification script",
        **doc,
    }
    return doc


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    raw13 = feeder_13_raw()
    raw37 = feeder_37_raw()
    write("ieee13_raw.json", raw13)
    write("ieee37_raw.json", raw37)
    write(
        "mods_ieee13.json",
        {"comment": "study modifications for the 13-node feeder", "mods": MODS_13},
    )
    write(
        "mods_ieee37.json",
        {"comment": "study modifications for the 37-node feeder", "mods": MODS_37},
    )
    write("ieee13_dual.json", spec_13_dual())
    write("ieee37_dual.json", spec_37_dual())

    print("building modified feeders:")
    write("ieee13.json", build_modified(raw13, MODS_13, "ieee13"))
    write("ieee37.json", build_modified(raw37, MODS_37, "ieee37"))

    total_kw = sum(kw for _, _, kw, _ in LOADS_37_KW)
    assert total_kw == 2457, total_kw
    total13 = sum(kw for _, _, kw, _ in LOADS_13_KW)
    print(f"13-node spot total {total13} kW, 37-node spot total {total_kw} kW")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Writes the bundled positive-sequence feeder files under data/grids/.

Line impedances are positive-sequence approximations (Z1 = Zself - Zmutual)
of the IEEE test feeder line configurations, in ohm/mile. Regulators and
switches become short low-impedance branches; transformers use their
nameplate impedance on the system base.
"""
import os
import sys

FT_PER_MILE = 5280.0


def write(path, name, v_kv, s_kva, buses, lines, note, nominal_kw):
    zb = (v_kv * 1e3) ** 2 / (s_kva * 1e3)
    with open(path, "w") as f:
        f.write("gridvolt-grid v1\n")
        f.write(f"# {note}\n")
        f.write(f"name {name}\n")
        f.write(f"v_base_kv {v_kv}\n")
        f.write(f"s_base_kva {s_kva}\n")
        f.write(f"nominal_load_kw {nominal_kw}\n")
        f.write("[buses]\n# name type\n")
        for b, t in buses:
            f.write(f"{b} {t}\n")
        f.write("[lines]\n# from to r_pu x_pu\n")
        for a, b, kind, val in lines:
            if kind == "pu":
                r, x = val
            else:
                (zr, zi), feet = kind, val
                r = zr * feet / FT_PER_MILE / zb
                x = zi * feet / FT_PER_MILE / zb
            f.write(f"{a} {b} {r:.8g} {x:.8g}\n")


def two_bus(out):
    write(os.path.join(out, "two_bus.grid"), "two_bus", 1.0, 1000.0,
          [("slack", "slack"), ("b2", "pq")],
          [("slack", "b2", "pu", (0.01, 0.02))],
          "two-bus test case: one line z = 0.01 + 0.02j p.u.", 500.0)


def ieee13(out):
    c601 = (0.1905, 0.5162)
    c602 = (0.5946, 0.7578)
    c603 = (1.1228, 0.8880)
    c604 = (1.1228, 0.8880)
    c605 = (1.3292, 1.3475)
    c606 = (0.4790, 0.4135)
    c607 = (1.3425, 0.5124)
    s_kva = 1000.0
    switch = (1e-4, 1e-4)
    # 500 kVA XFM-1, 1.1% + j2%, moved to the system base.
    xfm = (0.011 * s_kva / 500.0, 0.02 * s_kva / 500.0)
    lines = [
        ("650", "632", c601, 2000), ("632", "633", c602, 500), ("633", "634", "pu", xfm),
        ("632", "645", c603, 500), ("645", "646", c603, 300), ("632", "671", c601, 2000),
        ("671", "680", c601, 1000), ("671", "684", c604, 300), ("684", "611", c605, 300),
        ("684", "652", c607, 800), ("671", "692", "pu", switch), ("692", "675", c606, 500),
    ]
    buses = [("650", "slack")] + [(b, "pq") for b in
             ["632", "633", "634", "645", "646", "671", "680", "684", "611", "652", "692", "675"]]
    write(os.path.join(out, "ieee13.grid"), "ieee13", 4.16, s_kva, buses, lines,
          "IEEE 13-node feeder, single-phase positive-sequence equivalent (regulator omitted)", 3466.0)


def ieee34(out):
    c300 = (1.1267, 0.7564)
    c301 = (1.6973, 0.7673)
    c302 = (2.7995, 1.4855)
    c303 = (2.7995, 1.4855)
    c304 = (1.9217, 1.4212)
    s_kva = 1000.0
    # 500 kVA 24.9/4.16 kV transformer, 1.9% + j4.08%.
    xfm = (0.019 * s_kva / 500.0, 0.0408 * s_kva / 500.0)
    lines = [
        ("800", "802", c300, 2580), ("802", "806", c300, 1730), ("806", "808", c300, 32230),
        ("808", "810", c303, 5804), ("808", "812", c300, 37500), ("812", "814", c300, 29730),
        ("814", "850", c301, 10), ("850", "816", c301, 310), ("816", "818", c302, 1710),
        ("818", "820", c302, 48150), ("820", "822", c302, 13740), ("816", "824", c301, 10210),
        ("824", "826", c303, 3030), ("824", "828", c301, 840), ("828", "830", c301, 20440),
        ("830", "854", c301, 520), ("854", "856", c303, 23330), ("854", "852", c301, 36830),
        ("852", "832", c301, 10), ("832", "888", "pu", xfm), ("888", "890", "lv", 10560),
        ("832", "858", c301, 4900), ("858", "864", c303, 1620), ("858", "834", c301, 5830),
        ("834", "842", c301, 280), ("842", "844", c301, 1350), ("844", "846", c301, 3640),
        ("846", "848", c301, 530), ("834", "860", c301, 2020), ("860", "836", c301, 2680),
        ("836", "840", c301, 860), ("836", "862", c301, 280), ("862", "838", c304, 4860),
    ]
    # 888-890 runs at 4.16 kV: express its impedance on the low-voltage base.
    zb_lv = 4.16e3 ** 2 / (s_kva * 1e3)
    fixed = []
    for a, b, k, v in lines:
        if k == "lv":
            r = c300[0] * v / FT_PER_MILE / zb_lv
            x = c300[1] * v / FT_PER_MILE / zb_lv
            fixed.append((a, b, "pu", (r, x)))
        else:
            fixed.append((a, b, k, v))
    names = []
    for a, b, _, _ in fixed:
        for n in (a, b):
            if n not in names:
                names.append(n)
    buses = [(n, "slack" if n == "800" else "pq") for n in names]
    write(os.path.join(out, "ieee34.grid"), "ieee34", 24.9, s_kva, buses, fixed,
          "IEEE 34-node feeder, single-phase positive-sequence equivalent (regulators omitted)", 1769.0)


def ieee123(out):
    main = (0.3016, 0.5763)     # configs 1-6, three-phase overhead
    two = (0.3041, 0.6931)      # configs 7-8, two-phase
    lat = (1.3292, 1.3475)      # configs 9-11, single-phase laterals
    cable = (0.4790, 0.4135)    # config 12, underground
    s_kva = 1000.0
    short = (1e-4, 1e-4)
    three_phase = {
        ("149", "1"), ("1", "7"), ("7", "8"), ("8", "13"), ("13", "18"), ("18", "135"),
        ("135", "35"), ("35", "40"), ("40", "42"), ("42", "44"), ("44", "47"), ("47", "49"),
        ("49", "50"), ("50", "51"), ("13", "152"), ("152", "52"), ("52", "53"), ("53", "54"),
        ("54", "57"), ("57", "60"), ("60", "160"), ("160", "67"), ("67", "72"), ("72", "76"),
        ("76", "77"), ("77", "78"), ("78", "80"), ("80", "81"), ("81", "82"), ("82", "83"),
        ("76", "86"), ("86", "87"), ("67", "97"), ("97", "197"), ("197", "101"), ("101", "105"),
        ("105", "108"), ("108", "300"), ("18", "21"), ("21", "23"), ("23", "25"), ("25", "28"),
        ("28", "29"), ("29", "30"), ("30", "250"), ("60", "62"), ("62", "63"), ("63", "64"),
        ("64", "65"), ("65", "66"), ("97", "98"), ("98", "99"), ("99", "100"), ("100", "450"),
        ("47", "48"),
    }
    two_phase = {("57", "58"), ("58", "59"), ("81", "84"), ("84", "85"), ("54", "55"), ("55", "56")}
    cables = {("61", "610")}
    raw = [
        ("1", "2", 175), ("1", "3", 250), ("1", "7", 300), ("3", "4", 200), ("3", "5", 325),
        ("5", "6", 250), ("7", "8", 200), ("8", "12", 225), ("8", "9", 225), ("8", "13", 300),
        ("9", "14", 425), ("13", "34", 150), ("13", "18", 825), ("14", "11", 250), ("14", "10", 250),
        ("15", "16", 375), ("15", "17", 350), ("18", "19", 250), ("18", "21", 300), ("19", "20", 325),
        ("21", "22", 525), ("21", "23", 250), ("23", "24", 550), ("23", "25", 275), ("25", "26", 350),
        ("25", "28", 200), ("26", "27", 275), ("26", "31", 225), ("27", "33", 500), ("28", "29", 300),
        ("29", "30", 350), ("30", "250", 200), ("31", "32", 300), ("34", "15", 100), ("35", "36", 650),
        ("35", "40", 250), ("36", "37", 300), ("36", "38", 250), ("38", "39", 325), ("40", "41", 325),
        ("40", "42", 250), ("42", "43", 500), ("42", "44", 200), ("44", "45", 200), ("44", "47", 250),
        ("45", "46", 300), ("47", "48", 150), ("47", "49", 250), ("49", "50", 250), ("50", "51", 250),
        ("51", "151", 500), ("52", "53", 200), ("53", "54", 125), ("54", "55", 275), ("54", "57", 350),
        ("55", "56", 275), ("57", "58", 250), ("57", "60", 750), ("58", "59", 250), ("60", "61", 550),
        ("60", "62", 250), ("62", "63", 175), ("63", "64", 350), ("64", "65", 425), ("65", "66", 325),
        ("67", "68", 200), ("67", "72", 275), ("67", "97", 250), ("68", "69", 275), ("69", "70", 325),
        ("70", "71", 275), ("72", "73", 275), ("72", "76", 200), ("73", "74", 350), ("74", "75", 400),
        ("76", "77", 400), ("76", "86", 700), ("77", "78", 100), ("78", "79", 225), ("78", "80", 475),
        ("80", "81", 475), ("81", "82", 250), ("81", "84", 675), ("82", "83", 250), ("84", "85", 475),
        ("86", "87", 450), ("87", "88", 175), ("87", "89", 275), ("89", "90", 225), ("89", "91", 225),
        ("91", "92", 300), ("91", "93", 225), ("93", "94", 275), ("93", "95", 300), ("95", "96", 200),
        ("97", "98", 275), ("98", "99", 550), ("99", "100", 300), ("100", "450", 800), ("101", "102", 225),
        ("101", "105", 275), ("102", "103", 325), ("103", "104", 700), ("105", "106", 225),
        ("105", "108", 325), ("106", "107", 575), ("108", "109", 450), ("108", "300", 1000),
        ("109", "110", 300), ("110", "111", 575), ("110", "112", 125), ("112", "113", 525),
        ("113", "114", 325), ("135", "35", 375), ("149", "1", 400), ("152", "52", 400),
        ("160", "67", 350), ("197", "101", 250),
    ]
    lines = [("150", "149", "pu", short), ("13", "152", "pu", short), ("18", "135", "pu", short),
             ("60", "160", "pu", short), ("97", "197", "pu", short)]
    xfm = (0.0127 * s_kva / 150.0, 0.0272 * s_kva / 150.0)
    lines.append(("61", "610", "pu", xfm))
    for a, b, ft in raw:
        key = (a, b)
        if key in three_phase:
            z = main
        elif key in two_phase:
            z = two
        elif key in cables:
            z = cable
        else:
            z = lat
        lines.append((a, b, z, ft))
    names = []
    for a, b, _, _ in lines:
        for n in (a, b):
            if n not in names:
                names.append(n)
    buses = [(n, "slack" if n == "150" else "pq") for n in names]
    write(os.path.join(out, "ieee123.grid"), "ieee123", 4.16, s_kva, buses, lines,
          "IEEE 123-node feeder, single-phase positive-sequence equivalent (regulators as short branches)", 3490.0)
    return len(names)


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "..", "data", "grids")
    os.makedirs(out, exist_ok=True)
    two_bus(out)
    ieee13(out)
    ieee34(out)
    n = ieee123(out)
    print(f"wrote feeders to {out} (123-node case has {n} buses)")

"""Difference-in-differences on a simulated two-city disclosure panel.

The treated city starts publishing recommendations half-way through; the
control city never does.  Both share one draw of the market, so any gap is
caused by disclosure.  A panel with planted effects is fitted alongside as
a reference.

    python demos/did_disclosure.py
"""
from gspmarket import Panel, calibrated_market, did_fit, format_report, planted_panel
from gspmarket._rng import stream
from gspmarket.panel import disclosure_panel

m = calibrated_market()
sim = Panel.from_observations(disclosure_panel(m, rec_slots=3, pre_periods=20, post_periods=20,
                                               seed=1, adherence=0.5))
planted = planted_panel(group_effects=(5.372, 1.705, 0.0), rng=stream(1, "demo"))
print(format_report({"simulated": did_fit(sim), "simulated, by position": did_fit(sim, True),
                     "planted, by position": did_fit(planted, True)}), end="")

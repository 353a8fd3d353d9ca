"""Observed state variables and ventilator settings, with units and valid ranges."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Variable:
    name: str
    label: str
    unit: str
    lo: float
    hi: float
    group: str
    categorical: bool = False


STATE_VARIABLES: tuple[Variable, ...] = (
    Variable("map", "Mean Arterial Pressure", "mmHg", 30, 200, "circulatory"),
    Variable("dbp", "Diastolic Pressure", "mmHg", 20, 120, "circulatory"),
    Variable("sbp", "Systolic Pressure", "mmHg", 50, 260, "circulatory"),
    Variable("pinsp", "Inspiratory Airway Pressure", "cmH2O", 10, 60, "ventilation"),
    Variable("vt_obs", "Tidal Volume (observed)", "ml", 80, 2040, "ventilation"),
    Variable("hb", "Haemoglobin", "mmol/l", 2, 20, "haematology"),
    Variable("wbc", "White Blood Cell Count", "Gpt/l", 0, 30, "haematology"),
    Variable("sao2", "SaO2", "%", 40, 100, "gas exchange"),
    Variable("spo2", "SpO2", "%", 30, 100, "gas exchange"),
    Variable("pao2", "PaO2", "mmHg", 20, 600, "gas exchange"),
    Variable("paco2", "PaCO2", "mmHg", 20, 100, "gas exchange"),
    Variable("base_excess", "Base excess", "mmol/l", -20, 30, "blood gas"),
    Variable("ph", "pH", "-", 6, 8, "blood gas"),
    Variable("iv_fluid", "Intravenous Fluid Intake", "ml/4h", 0, 20000, "fluid status"),
    Variable("urine", "Urine Output", "ml/4h", 0, 2000, "fluid status"),
    Variable("vaso", "Vasopressors", "NE", 0, 5, "fluid status"),
    Variable("potassium", "Potassium", "mmol/l", 2, 10, "electrolytes"),
    Variable("chloride", "Chloride", "mmol/l", 80, 150, "electrolytes"),
    Variable("sodium", "Sodium", "mmol/l", 120, 180, "electrolytes"),
    Variable("inr", "INR", "-", 0.9, 15, "coagulation"),
    Variable("hr", "Heart Rate", "1/min", 20, 200, "heart function"),
    Variable("age", "Age", "years", 18, 120, "demographics"),
    Variable("sex", "Sex", "-", 0, 1, "demographics", categorical=True),
    Variable("weight", "Weight", "kg", 40, 140, "demographics"),
    Variable("height", "Height", "cm", 155, 200, "demographics"),
)

ACTION_VARIABLES: tuple[Variable, ...] = (
    Variable("mode", "Ventilation Control Mode", "-", 0, 1, "action", categorical=True),
    Variable("rr", "Respiratory rate", "1/min", 5, 60, "action"),
    Variable("vt", "Tidal Volume", "ml/kg", 3, 12, "action"),
    Variable("dp", "Driving Pressure", "cmH2O", 0, 26, "action"),
    Variable("peep", "PEEP", "cmH2O", 0, 20, "action"),
    Variable("fio2", "FiO2", "%", 21, 100, "action"),
)

STATE_NAMES = tuple(v.name for v in STATE_VARIABLES)
ACTION_NAMES = tuple(v.name for v in ACTION_VARIABLES)
CONT_ACTION_NAMES = ACTION_NAMES[1:]
STATE_INDEX = {n: i for i, n in enumerate(STATE_NAMES)}
ACTION_INDEX = {n: i for i, n in enumerate(ACTION_NAMES)}
VARIABLES = {v.name: v for v in STATE_VARIABLES + ACTION_VARIABLES}

STATE_DIM = len(STATE_VARIABLES)
N_CONT = len(CONT_ACTION_NAMES)
N_MODES = 2

VCV, PCV = 0, 1
MODE_NAMES = ("VCV", "PCV")

# Variables whose timestamps delimit ventilation episodes.
VENT_VARIABLES = frozenset(ACTION_NAMES + ("pinsp", "vt_obs"))
STATIC_VARIABLES = frozenset(("age", "sex", "weight", "height"))
CATEGORICAL_VARIABLES = frozenset(v.name for v in STATE_VARIABLES + ACTION_VARIABLES if v.categorical)

DEFAULT_ENCODINGS = {
    "sex": {"male": 0, "m": 0, "female": 1, "f": 1},
    "mode": {"vcv": VCV, "volume": VCV, "pcv": PCV, "pressure": PCV},
}

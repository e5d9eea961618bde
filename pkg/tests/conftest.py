"""Shared scenario-document builders for the harness-level suites."""

import copy

import pytest

from sdransim import scenario


def base_doc(**overrides):
    """A minimal single-eNB scenario; override fields per test."""
    doc = {
        "seed": 1,
        "duration_ms": 4000,
        "latency": {"profile": "zero-jitter"},
        "enbs": [{
            "enb_id": 1,
            "cells": [{"cell_id": 0, "n_prb": 50}],
        }],
        "epc": {"subscribers": ["imsi:214910000000001",
                                "imsi:214910000000002",
                                "imsi:214910000000003"]},
        "slices": [],
        "ues": [],
    }
    doc.update(overrides)
    return doc


def slice_doc(rsi=1, enbs=((1, 0),), rules=None, l2=None, nas=None, at=200):
    if rules is None:
        rules = [
            {"metric": "drb_count", "match": [["*", "*"]],
             "scope": "cell", "bound": "min", "value": 1},
            {"metric": "drb_count", "match": [["*", "*"]],
             "scope": "slice", "bound": "max", "value": 2},
        ]
    template = {
        "rsi_id": rsi,
        "plmn_list": ["21491"],
        "cell_list": [{"enb_id": e, "cell_id": c} for e, c in enbs],
        "rrm_policy": {
            "l3": {"averaging_window_ms": 1000, "rules": rules},
            "l2": l2 or {"inter_slice": "wrr", "share_percent": 100,
                         "intra_slice": "rr"},
        },
        "nas_id_list": nas if nas is not None else [
            "imsi:214910000000001",
            "imsi:214910000000002",
            "imsi:214910000000003",
        ],
    }
    return {"at_time_ms": at, "template": template}


def ue_doc(n=1, power_on=1000, enb=1, cell=0, **extra):
    doc = {
        "nas_id": f"imsi:21491000000000{n}",
        "enb_id": enb,
        "cell_id": cell,
        "power_on_ms": power_on,
        "plmn": "21491",
        "cqi": 10,
        "drbs": [{"qci": 7, "arp": 9}],
    }
    doc.update(extra)
    return doc


def run_doc(doc, **kwargs):
    return scenario.run(scenario.spec_from_document(copy.deepcopy(doc)), **kwargs)


@pytest.fixture
def section_v_variants():
    """The builtin scenario re-policied for none/local/central paths."""
    def variant(mode, traffic=False, profile=None):
        doc = scenario.section_v_document()
        doc["duration_ms"] = 9000
        if profile is not None:
            doc["latency"] = {"profile": profile}
        if not traffic:
            for ue in doc["ues"]:
                ue.pop("cbr_dl_bps", None)
        if mode == "none":
            doc["enbs"][0]["slicing_supported"] = False
            doc["slices"] = []
        elif mode == "local":
            doc["slices"][0]["template"]["rrm_policy"]["l3"]["rules"] = [
                {"metric": "drb_count", "match": [["*", "*"]],
                 "scope": "cell", "bound": "min", "value": 10},
            ]
        elif mode == "central":
            doc["slices"][0]["template"]["rrm_policy"]["l3"]["rules"] = [
                {"metric": "drb_count", "match": [["*", "*"]],
                 "scope": "slice", "bound": "max", "value": 10},
            ]
        else:
            raise ValueError(mode)
        return scenario.spec_from_document(doc)

    return variant

"""Glue for running a scenario end to end: simulate, measure, filter."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .grid import DogmaFrame
from .pfilter import FilterConfig, run_filter
from .sim import GroundTruth, ScenarioSpec, ground_truth, measure

log = logging.getLogger(__name__)


@dataclass
class SequenceRun:
    scenario: ScenarioSpec
    measurements: list[np.ndarray]
    frames: list[DogmaFrame]
    truth: list[GroundTruth]


def simulate_measurements(scenario: ScenarioSpec) -> list[np.ndarray]:
    return [measure(scenario, t) for t in scenario.frame_times()]


def fuse(scenario: ScenarioSpec, measurements, config: FilterConfig | None = None) -> list[DogmaFrame]:
    times = scenario.frame_times()
    geometries = [scenario.frame_geometry(t) for t in times]
    poses = [scenario.ego_pose(t) for t in times]
    return run_filter(measurements, geometries, times, config, poses)


def run_scenario(scenario: ScenarioSpec, config: FilterConfig | None = None,
                 with_truth: bool = True) -> SequenceRun:
    meas = simulate_measurements(scenario)
    log.info("simulated %d frames of %s", len(meas), scenario.name or "scenario")
    frames = fuse(scenario, meas, config)
    truth = [ground_truth(scenario, t) for t in scenario.frame_times()] if with_truth else []
    return SequenceRun(scenario, meas, frames, truth)

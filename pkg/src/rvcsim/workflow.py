"""Six-step cannulation workflow with verification gates and the retry loop.

Step order: Preparation -> Navigation -> Puncture -> VerifyRetract ->
Infusion -> Retraction -> Done, with VerifyRetract looping back to Puncture
on a failed verification (bounded by max_attempts) and Infusion able to fail
the trial outright.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from .robot import Key


class Step(str, Enum):
    PREPARATION = "preparation"
    NAVIGATION = "navigation"
    PUNCTURE = "puncture"
    VERIFY_RETRACT = "verify_retract"
    INFUSION = "infusion"
    RETRACTION = "retraction"
    DONE = "done"
    FAILED = "failed"


class EventKind(str, Enum):
    RCM_REGISTERED = "rcm_registered"
    CONTACT_VERIFIED = "contact_verified"
    PUNCTURE_PULSE_DONE = "puncture_pulse_done"
    VERIFICATION_PASSED = "verification_passed"
    VERIFICATION_FAILED = "verification_failed"
    FLUSH_CONFIRMED = "flush_confirmed"
    INFUSION_COMPLETE = "infusion_complete"
    INFUSION_FAILED = "infusion_failed"
    NEEDLE_EXITED = "needle_exited"


@dataclass(frozen=True)
class WorkflowEvent:
    kind: EventKind
    t: float


class TransitionError(ValueError):
    """Event is not legal in the current step; state is left unchanged."""


# (step, event) -> next step; FLUSH_CONFIRMED is recorded but keeps the step.
_TRANSITIONS = {
    (Step.PREPARATION, EventKind.RCM_REGISTERED): Step.NAVIGATION,
    (Step.NAVIGATION, EventKind.CONTACT_VERIFIED): Step.PUNCTURE,
    (Step.PUNCTURE, EventKind.PUNCTURE_PULSE_DONE): Step.VERIFY_RETRACT,
    (Step.VERIFY_RETRACT, EventKind.FLUSH_CONFIRMED): Step.VERIFY_RETRACT,
    (Step.VERIFY_RETRACT, EventKind.VERIFICATION_PASSED): Step.INFUSION,
    (Step.VERIFY_RETRACT, EventKind.VERIFICATION_FAILED): Step.PUNCTURE,
    (Step.INFUSION, EventKind.INFUSION_COMPLETE): Step.RETRACTION,
    (Step.INFUSION, EventKind.INFUSION_FAILED): Step.FAILED,
    (Step.RETRACTION, EventKind.NEEDLE_EXITED): Step.DONE,
}

# Keys the operator may use in each step. Infusion locks everything: the
# tool must hold still while the drug runs.
_GATES = {
    Step.PREPARATION: frozenset(),
    Step.NAVIGATION: frozenset({Key.LEFT, Key.RIGHT, Key.UP, Key.DOWN, Key.D, Key.U}),
    Step.PUNCTURE: frozenset({Key.P}),
    Step.VERIFY_RETRACT: frozenset({Key.R, Key.LEFT, Key.RIGHT, Key.UP, Key.DOWN}),
    Step.INFUSION: frozenset(),
    Step.RETRACTION: frozenset({Key.R}),
    Step.DONE: frozenset(),
    Step.FAILED: frozenset(),
}


@dataclass(frozen=True)
class WorkflowState:
    step: Step = Step.PREPARATION
    attempt: int = 1
    max_attempts: int = 10
    step_started_at: tuple = ()   # ((step value, t), ...) in entry order

    @property
    def terminal(self):
        return self.step in (Step.DONE, Step.FAILED)


def advance(state: WorkflowState, event: WorkflowEvent) -> WorkflowState:
    """Apply one workflow event; returns the new state.

    A failed verification loops back to Puncture and increments the attempt
    counter; once max_attempts is exhausted the trial fails instead.

    Raises:
        TransitionError: the event is illegal in the current step.
    """
    key = (state.step, event.kind)
    if key not in _TRANSITIONS:
        raise TransitionError(f"event {event.kind.value} illegal in step {state.step.value}")
    target = _TRANSITIONS[key]
    attempt = state.attempt
    if event.kind is EventKind.VERIFICATION_FAILED:
        if attempt >= state.max_attempts:
            target = Step.FAILED
        else:
            attempt += 1
    if target is state.step:
        return state
    started = state.step_started_at + ((target.value, event.t),)
    return replace(state, step=target, attempt=attempt, step_started_at=started)


def gate_keys(state: WorkflowState | Step) -> frozenset:
    """Set of keys the controller will accept in the given step."""
    step = state.step if isinstance(state, WorkflowState) else state
    return _GATES[step]


# Reporting groups: puncture and the slight-retract verification are timed
# jointly, matching how trial durations are reported.
DURATION_GROUPS = (
    ("navigation", (Step.NAVIGATION,)),
    ("puncture_and_verify", (Step.PUNCTURE, Step.VERIFY_RETRACT)),
    ("infusion", (Step.INFUSION,)),
    ("retraction", (Step.RETRACTION,)),
)


def step_durations(log) -> dict:
    """Per-step wall times (seconds) for a finished trial log.

    Repeat-loop visits accumulate into their group. The log supplies the
    workflow events (step transitions) and the final sample time.
    """
    intervals = {}
    current = Step.PREPARATION
    t_enter = 0.0
    state = WorkflowState()
    for event in log.events:
        new_state = advance(state, event)
        if new_state.step is not state.step:
            intervals.setdefault(current, 0.0)
            intervals[current] += event.t - t_enter
            current = new_state.step
            t_enter = event.t
        state = new_state
    t_end = log.samples[-1].t if log.samples else t_enter
    intervals.setdefault(current, 0.0)
    intervals[current] += t_end - t_enter
    out = {}
    for name, steps in DURATION_GROUPS:
        out[name] = sum(intervals.get(s, 0.0) for s in steps)
    return out

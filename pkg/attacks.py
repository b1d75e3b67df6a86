"""Adversarial scenario runners: cloning, software rollback, sealed-state replay
and the trusted-time accounting check.

Each runner drives an installed world through one attack and classifies the
result; the predicates over the trace decide whether a guarantee was broken.
"""

import logging
from collections import Counter
from functools import partial

from crypto_shim import measure
from errors import KeyfortError
from models.attestation import SealedBlob
from models.outcome import OperationOutcome, OutcomeKind
from orchestrator import classify_outcome, operation_outcome, plan_update
from vclock import ContextSwitch, rdtime
from world import Device, World

logger = logging.getLogger(__name__)


def _summary(verdicts: list[str]) -> str:
    return ", ".join(f"{verdict}={count}" for verdict, count in sorted(Counter(verdicts).items()))


def _restart(world: World, device: Device) -> None:
    world.crash_device(device.name)
    world.run()


def clone_attack(world: World) -> OperationOutcome:
    """Start extra instances of an installed binary and count how many run at once."""
    operation = world.scenario.operation
    install = world.scenario.target_install()
    device = world.device(operation.source)
    software_id, binary = install.id.encode(), install.binary.encode()

    verdicts = [
        world.host_init(device, software_id, install.version, binary, install.clone_bound)[0]
        for _ in range(operation.attempts)
    ]
    m = measure(binary)
    live = len(device.sm.live_with(lambda record: record.m == m))
    world.finish()
    logger.info("clone attack finished", extra={"live": live, "clone_bound": install.clone_bound})

    if live > install.clone_bound:
        kind = OutcomeKind.ATTACK_SUCCEEDED
    elif any(verdict != "accepted" for verdict in verdicts):
        kind = OutcomeKind.ATTACK_REJECTED
    else:
        kind = OutcomeKind.COMPLETED
    return operation_outcome(world, kind, detail=f"{_summary(verdicts)}; live={live}")


def rollback_attack(world: World) -> OperationOutcome:
    """Update to the new version, then try to reinstall the old one.

    With ``crash_before_attack`` the SM is crashed and restarted first; a
    planned adversary replay re-presents the store image from before the update.
    """
    operation = world.scenario.operation
    install = world.scenario.target_install()
    device = world.device(operation.source)
    software_id = install.id.encode()

    world.begin_operation(plan_update(world, device.name, software_id, operation.version, operation.binary.encode()))
    world.run()
    update = classify_outcome(world.trace, world)
    if update != OutcomeKind.COMMITTED:
        world.finish()
        return operation_outcome(world, update, detail="update did not commit")

    if operation.crash_before_attack:
        _restart(world, device)
    verdicts = [
        world.host_init(device, software_id, install.version, install.binary.encode(), install.clone_bound)[0]
        for _ in range(operation.attempts)
    ]
    world.finish()

    if "accepted" in verdicts:
        logger.warning("stale version accepted", extra={"device": device.name, "v": install.version})
        return operation_outcome(world, OutcomeKind.ATTACK_SUCCEEDED, detail=_summary(verdicts))
    return operation_outcome(world, OutcomeKind.REJECTED_AT_INIT, detail=_summary(verdicts))


def _seal(world: World, device: Device, eid: int, ctr_ID: int) -> SealedBlob:
    with world.entered(device, eid) as enclave:
        blob = enclave.seal_state(device.sm, ctr_ID)
    counter = device.sm.get_mc_value(eid, ctr_ID)
    world.record(
        "Seal",
        src=device.name,
        eid=eid,
        verdict="accepted",
        device=device,
        detail={"ctr": ctr_ID, "counter": counter, "state": enclave.state_digest()},
    )
    return blob


def _unseal(world: World, device: Device, eid: int, blob: SealedBlob, label: str) -> str:
    detail: dict = {"ctr": blob.ctr_ID, "blob": label}
    if not device.up:
        world.record("Unseal", src=device.name, eid=eid, verdict="halted", device=device, detail=detail)
        return "halted"
    try:
        detail["counter"] = device.sm.get_mc_value(eid, blob.ctr_ID)
        with world.entered(device, eid) as enclave:
            enclave.unseal_state(device.sm, blob)
        verdict = "accepted"
    except KeyfortError as exc:
        verdict = exc.code
    world.record("Unseal", src=device.name, eid=eid, verdict=verdict, device=device, detail=detail)
    return verdict


def state_replay_attack(world: World) -> OperationOutcome:
    """Seal twice under one counter and try to restore the older blob."""
    operation = world.scenario.operation
    device = world.device(operation.source)
    eid = world.find_enclave(device.name, operation.target.encode()).eid

    ctr_ID = device.sm.allocate_mc(eid)
    stale = _seal(world, device, eid, ctr_ID)
    world.capture_stores()
    for data in operation.inputs_after:
        world.deliver_input(operation.target.encode(), data.encode(), device=device, eid=eid)
    fresh = _seal(world, device, eid, ctr_ID)

    if operation.crash_before_attack:
        _restart(world, device)
    verdicts = [_unseal(world, device, eid, stale, "stale") for _ in range(operation.attempts)]
    current = _unseal(world, device, eid, fresh, "current")
    world.finish(inputs_after=[])

    detail = f"stale: {_summary(verdicts)}; current: {current}"
    if "accepted" in verdicts:
        logger.warning("stale sealed state accepted", extra={"device": device.name, "eid": eid})
        return operation_outcome(world, OutcomeKind.ATTACK_SUCCEEDED, detail=detail)
    return operation_outcome(world, OutcomeKind.ATTACK_REJECTED, detail=detail)


def _switch(world: World, device: Device, eid: int, direction: ContextSwitch) -> None:
    verdict = "accepted"
    try:
        device.sm.context_switch(direction, eid)
    except KeyfortError as exc:
        verdict = exc.code
    world.record("Switch", src=device.name, eid=eid, verdict=verdict, device=device, detail={"direction": direction.value})


def time_accounting(world: World) -> OperationOutcome:
    """Replay the scheduled enter/leave intervals and compare enclave-local time with their sum."""
    operation = world.scenario.operation
    device = world.device(operation.source)
    eid = world.find_enclave(device.name, operation.target.encode()).eid

    start = rdtime(world.clock)
    before = device.sm.enclave_local_time(eid)
    for enter, leave in operation.schedule:
        world.schedule(start + enter, "enter", partial(_switch, world, device, eid, ContextSwitch.HOST_TO_ENCLAVE))
        world.schedule(start + leave, "leave", partial(_switch, world, device, eid, ContextSwitch.ENCLAVE_TO_HOST))
    world.run()

    measured = device.sm.enclave_local_time(eid) - before
    expected = sum(leave - enter for enter, leave in operation.schedule)
    world.record(
        "LocalTime",
        src=device.name,
        eid=eid,
        verdict="exact" if measured == expected else "drift",
        device=device,
        detail={"measured": measured, "expected": expected},
    )
    world.finish()
    return operation_outcome(world, OutcomeKind.COMPLETED, detail=f"local time {measured} of {expected} ticks")

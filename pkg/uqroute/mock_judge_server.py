"""Bundled aiohttp server speaking the judge wire protocol.

``POST /judge`` takes {id, context, response_a, response_b} and answers
{id, label}. Labels come from a ground-truth-backed simulated judge (the
context and responses must be JSON float lists) or from a fixed label. The
first ``fail_first`` requests for each id can be answered with HTTP 500 to
exercise client retries.
"""

import logging
from typing import Optional

from aiohttp import web
from pydantic import ValidationError

from uqroute.judge import JudgePair, SimJudge
from uqroute.pref_data import GroundTruth
from uqroute.utils.config import SimJudgeConfig
from uqroute.utils.errors import InvalidInputError
from uqroute.utils.models import JudgeRequest

logger = logging.getLogger(__name__)

JUDGE_ROUTE = "/judge"

SIM_JUDGE_KEY = web.AppKey("sim_judge", object)
STATE_KEY = web.AppKey("state", dict)


async def _handle_judge(request: web.Request) -> web.Response:
    state = request.app[STATE_KEY]
    state["requests"] += 1
    try:
        body = JudgeRequest.model_validate(await request.json())
    except (ValueError, ValidationError) as exc:
        return web.json_response({"error": f"bad request: {exc}"}, status=400)

    failures = state["failures"]
    if failures.get(body.id, 0) < state["fail_first"]:
        failures[body.id] = failures.get(body.id, 0) + 1
        logger.debug("Injecting HTTP 500 for %s (%d)", body.id, failures[body.id])
        return web.json_response({"error": "injected failure"}, status=500)

    if state["fixed_label"] is not None:
        label = state["fixed_label"]
    else:
        judge: Optional[SimJudge] = request.app[SIM_JUDGE_KEY]
        if judge is None:
            return web.json_response({"error": "server has no ground truth"}, status=400)
        try:
            label = judge.judge_sync(JudgePair.from_request(body)).label
        except InvalidInputError as exc:
            return web.json_response({"error": str(exc)}, status=400)
    return web.json_response({"id": body.id, "label": label})


def create_app(
    truth: Optional[GroundTruth] = None,
    sim_config: Optional[SimJudgeConfig] = None,
    fixed_label: Optional[int] = None,
    fail_first: int = 0,
) -> web.Application:
    """Build the mock judge application.

    Args:
        truth: Ground truth backing the simulated labels.
        sim_config: Simulated judge settings (defaults if omitted).
        fixed_label: Answer every request with this label instead.
        fail_first: Number of initial HTTP 500 replies per request id.
    """
    if fixed_label is not None and fixed_label not in (0, 1, 2):
        raise InvalidInputError(f"fixed label must be 0, 1 or 2, got {fixed_label}")
    app = web.Application()
    app[SIM_JUDGE_KEY] = SimJudge(sim_config or SimJudgeConfig(), truth) if truth is not None else None
    app[STATE_KEY] = {
        "requests": 0,
        "failures": {},
        "fail_first": fail_first,
        "fixed_label": fixed_label,
    }
    app.router.add_post(JUDGE_ROUTE, _handle_judge)
    return app


async def start_server(app: web.Application, host: str = "127.0.0.1", port: int = 0) -> tuple[web.AppRunner, str]:
    """Start ``app`` on host:port (0 picks a free port).

    Returns:
        The runner (call ``cleanup()`` to stop) and the judge endpoint URL.
    """
    runner = web.AppRunner(app)
    await runner.setup()
    site = web.TCPSite(runner, host, port)
    await site.start()
    bound_port = runner.addresses[0][1]
    url = f"http://{host}:{bound_port}{JUDGE_ROUTE}"
    logger.info("Mock judge listening on %s", url)
    return runner, url


def serve(app: web.Application, host: str, port: int) -> None:
    """Run the server in the foreground until interrupted."""
    logger.info("Starting mock judge on http://%s:%d%s", host, port, JUDGE_ROUTE)
    web.run_app(app, host=host, port=port, print=None)

"""MCP server exposing instance solves, sweeps and result verification."""

import asyncio
import json
from pathlib import Path

from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import TextContent, Tool

from .harness import evaluate, run_experiment, summarize
from .models import Scheme, ScenarioConfig
from .results_export import round_floats, write_json
from .results_import import verify_results

server = Server("ma-power")

MAX_TOOL_SEEDS = 50

_SCENARIO_SCHEMA = {
    "type": "object",
    "description": (
        "Scenario fields (n_elements, n_users, gamma_db, noise_dbm, min_distance_mm, csi, "
        "kappa, grid{area_scale, step_mm}, channel{n_paths}, tolerances{...}); "
        "omitted fields keep their defaults"
    ),
}


def _json(obj) -> str:
    """Convert model to JSON string."""
    if hasattr(obj, "model_dump"):
        obj = obj.model_dump(mode="json")
    return json.dumps(round_floats(obj), default=str, indent=2)


@server.list_tools()
async def list_tools() -> list[Tool]:
    return [
        Tool(
            name="solve_instance",
            description="""Solve one seeded instance with one scheme.

Builds the instance from the scenario and seed, runs the scheme (bnb, sca,
random, as, ao, ignore-motion, es, mc-optimal, mc-blind), re-verifies the
design and returns the record with the selected grid positions.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "scenario": _SCENARIO_SCHEMA,
                    "scheme": {
                        "type": "string",
                        "enum": [s.value for s in Scheme],
                        "description": "Scheme to run (default: bnb)",
                    },
                    "seed": {"type": "integer", "description": "Trial seed (default: 0)"},
                    "sweep_index": {
                        "type": "integer",
                        "description": "Index into the scenario's sweep values (default: 0)",
                    },
                },
            },
        ),
        Tool(
            name="run_sweep",
            description=f"""Run a Monte Carlo sweep and return mean power per scheme and sweep value.

The scenario's seed count is capped at {MAX_TOOL_SEEDS}. Pass `output` to also
write the full JSON result file.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "scenario": _SCENARIO_SCHEMA,
                    "output": {"type": "string", "description": "Path for the JSON result file"},
                },
                "required": ["scenario"],
            },
        ),
        Tool(
            name="verify_results",
            description="Re-verify every design stored in a JSON result file.",
            inputSchema={
                "type": "object",
                "properties": {
                    "path": {"type": "string", "description": "Path to the JSON result file"},
                },
                "required": ["path"],
            },
        ),
        Tool(
            name="info",
            description="Describe the tools, schemes and scenario fields.",
            inputSchema={"type": "object", "properties": {}},
        ),
    ]


@server.call_tool()
async def call_tool(name: str, arguments: dict) -> list[TextContent]:
    try:
        result = await _handle_tool(name, arguments)
        return [TextContent(type="text", text=result)]
    except Exception as e:
        return [TextContent(type="text", text=f"Error: {str(e)}")]


async def _handle_tool(name: str, args: dict) -> str:
    if name == "solve_instance":
        config = ScenarioConfig.model_validate(args.get("scenario") or {})
        scheme = Scheme(args.get("scheme", Scheme.BNB.value))
        seed = int(args.get("seed", 0))
        index = int(args.get("sweep_index", 0))
        if not 0 <= index < len(config.sweep_points):
            raise ValueError(f"sweep_index {index} out of range")
        outcome = await asyncio.to_thread(evaluate, config, index, seed, scheme)
        payload = outcome.record.model_dump(mode="json")
        if outcome.design is not None and outcome.design.found:
            payload["positions"] = [int(p) for p in outcome.design.positions]
        return _json(payload)

    if name == "run_sweep":
        config = ScenarioConfig.model_validate(args["scenario"])
        if config.seeds.count > MAX_TOOL_SEEDS:
            config = config.model_copy(
                update={"seeds": config.seeds.model_copy(update={"count": MAX_TOOL_SEEDS})}
            )
        result = await asyncio.to_thread(run_experiment, config)
        if args.get("output"):
            write_json(result, Path(args["output"]))
        return _json({"scenario_id": config.scenario_id, "summary": summarize(result)})

    if name == "verify_results":
        stats = await asyncio.to_thread(verify_results, Path(args["path"]))
        return _json(stats)

    if name == "info":
        schemes = "\n".join(f"- `{s.value}`" for s in Scheme)
        return f"""# ma-power

Joint movable-antenna placement and beamforming for minimum average BS power.

## Tools
- `solve_instance` - One seeded instance, one scheme, verified record
- `run_sweep` - Monte Carlo sweep summary (mean power per scheme and sweep value)
- `verify_results` - Re-check a JSON result file
- `info` - This info page

## Schemes
{schemes}

## Scenario
Any field of the scenario file (see configs/desk.json); `csi` is `perfect` or
`imperfect`, `sweep` holds `axis` (gamma_db, area_scale, n_elements, t_ma_s,
kappa, step_mm) and `values`.
"""

    return f"Unknown tool: {name}"


async def run_server():
    """Run the MCP server with stdio transport."""
    async with stdio_server() as (read_stream, write_stream):
        await server.run(read_stream, write_stream, server.create_initialization_options())


def main():
    """Run the MCP server."""
    asyncio.run(run_server())


if __name__ == "__main__":
    main()

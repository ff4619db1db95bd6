/**
 * Readers for the benchmark harness's reduced artifacts.
 *
 * A sweep directory contains one subdirectory per run plus comparison.json
 * and knee_report.json. Figures consume only summary.json and resources.csv
 * (never raw samples) so every number rendered is single-sourced from the
 * metrics pipeline.
 */

import * as fs from "node:fs";
import * as path from "node:path";

export interface KdePoints {
  x: number[];
  y: number[];
  bandwidth_log10: number;
}

export interface LatencySummary {
  n: number;
  min: number;
  p25: number;
  median: number;
  p75: number;
  p99: number;
  max: number;
  mean: number;
  kde: KdePoints;
}

export interface EcdfCurve {
  x: number[];
  f: number[];
}

export interface Stat {
  mean: number;
  min: number;
  max: number;
}

export interface NetAggregate {
  in_total: number;
  out_total: number;
  in_peak_rate: number;
  out_peak_rate: number;
  io_peak_rate: number;
}

export interface ResourceAggregate {
  cpu_pct: Stat;
  mem_bytes: Stat;
  net: NetAggregate;
  samples: number;
}

export interface RunSummary {
  run_id: string;
  scenario: string;
  payload_bytes: number;
  users: number;
  requests_per_user: number;
  latency_ms: LatencySummary | null;
  ecdf_ms: EcdfCurve | null;
  resources: Record<string, ResourceAggregate>;
  valid: boolean;
}

export interface SweepCell {
  run_id: string;
  scenario: string;
  users: number;
  payload_bytes: number;
  valid: boolean;
}

export interface Sweep {
  dir: string;
  runs: RunSummary[];
  expected: SweepCell[]; // from comparison.json when available
  warnings: string[];
}

export function loadRunSummary(runDir: string): RunSummary {
  const raw = fs.readFileSync(path.join(runDir, "summary.json"), "utf-8");
  return JSON.parse(raw) as RunSummary;
}

export function loadSweep(dir: string): Sweep {
  const warnings: string[] = [];
  const runs: RunSummary[] = [];
  for (const entry of fs.readdirSync(dir, { withFileTypes: true }).sort((a, b) =>
    a.name.localeCompare(b.name),
  )) {
    if (!entry.isDirectory()) continue;
    const runDir = path.join(dir, entry.name);
    if (!fs.existsSync(path.join(runDir, "runconfig.json"))) continue;
    if (!fs.existsSync(path.join(runDir, "summary.json"))) {
      warnings.push(`run ${entry.name} has no summary.json (failed run?)`);
      continue;
    }
    try {
      runs.push(loadRunSummary(runDir));
    } catch (err) {
      warnings.push(`run ${entry.name}: unreadable summary (${String(err)})`);
    }
  }

  let expected: SweepCell[] = [];
  const comparisonPath = path.join(dir, "comparison.json");
  if (fs.existsSync(comparisonPath)) {
    const doc = JSON.parse(fs.readFileSync(comparisonPath, "utf-8")) as {
      cells?: SweepCell[];
    };
    expected = doc.cells ?? [];
  }
  if (runs.length === 0) {
    warnings.push(`no readable runs under ${dir}`);
  }
  return { dir, runs, expected, warnings };
}

/** Group runs by (scenario, payload) and order each group by user count. */
export function groupForFigures(sweep: Sweep): Map<string, RunSummary[]> {
  const groups = new Map<string, RunSummary[]>();
  for (const run of sweep.runs) {
    const key = `${run.scenario}-${run.payload_bytes}B`;
    const group = groups.get(key) ?? [];
    group.push(run);
    groups.set(key, group);
  }
  for (const group of groups.values()) {
    group.sort((a, b) => a.users - b.users);
  }
  return groups;
}

/** User counts a group is expected to cover, from the sweep comparison. */
export function expectedUsers(sweep: Sweep, scenario: string, payload: number): number[] {
  const users = new Set<number>();
  for (const cell of sweep.expected) {
    if (cell.scenario === scenario && cell.payload_bytes === payload) {
      users.add(cell.users);
    }
  }
  return [...users].sort((a, b) => a - b);
}

/**
 * Pure figure models. Builders copy numbers straight out of the artifacts;
 * the rendering layer computes no statistics of its own, so whatever a
 * figure shows can be traced to a summary.json field verbatim.
 */

import {
  RunSummary,
  Stat,
  Sweep,
  expectedUsers,
  groupForFigures,
} from "./artifacts.js";

export interface ViolinEntry {
  users: number;
  missing: false;
  n: number;
  min: number;
  p25: number;
  median: number;
  p75: number;
  max: number;
  kdeX: number[]; // latency ms
  kdeY: number[]; // density over log10(ms)
}

export interface MissingEntry {
  users: number;
  missing: true;
}

export type ViolinSlot = ViolinEntry | MissingEntry;

export interface ViolinFigure {
  kind: "violin";
  scenario: string;
  payloadBytes: number;
  entries: ViolinSlot[];
  logMin: number;
  logMax: number;
}

export interface CdfCurve {
  users: number;
  x: number[];
  f: number[];
}

export interface CdfFigure {
  kind: "cdf";
  scenario: string;
  payloadBytes: number;
  curves: CdfCurve[];
  missingUsers: number[];
  logMin: number;
  logMax: number;
}

export interface ResourceRow {
  users: number;
  cpuPct: Stat;
  memBytes: Stat;
  netTotalBytes: number;
  netPeakRate: number;
}

export interface ResourceFigure {
  kind: "resource";
  scenario: string;
  payloadBytes: number;
  component: string;
  rows: ResourceRow[];
  missingUsers: number[];
}

export type Figure = ViolinFigure | CdfFigure | ResourceFigure;

function logSpan(values: number[]): { logMin: number; logMax: number } {
  const positive = values.filter((v) => v > 0);
  if (positive.length === 0) {
    return { logMin: 0, logMax: 1 };
  }
  const logMin = Math.log10(Math.min(...positive));
  const logMax = Math.log10(Math.max(...positive));
  return logMin === logMax
    ? { logMin: logMin - 0.5, logMax: logMax + 0.5 }
    : { logMin, logMax };
}

function withGaps(
  sweep: Sweep,
  group: RunSummary[],
): { present: Map<number, RunSummary>; users: number[] } {
  const present = new Map(group.map((run) => [run.users, run]));
  const sample = group[0];
  const expected = expectedUsers(sweep, sample.scenario, sample.payload_bytes);
  const users = expected.length > 0 ? expected : [...present.keys()].sort((a, b) => a - b);
  return { present, users };
}

export function buildViolin(sweep: Sweep, group: RunSummary[]): ViolinFigure {
  const { present, users } = withGaps(sweep, group);
  const entries: ViolinSlot[] = [];
  const spanValues: number[] = [];
  for (const u of users) {
    const run = present.get(u);
    if (!run || !run.valid || !run.latency_ms) {
      entries.push({ users: u, missing: true });
      continue;
    }
    const lat = run.latency_ms;
    entries.push({
      users: u,
      missing: false,
      n: lat.n,
      min: lat.min,
      p25: lat.p25,
      median: lat.median,
      p75: lat.p75,
      max: lat.max,
      kdeX: lat.kde.x,
      kdeY: lat.kde.y,
    });
    spanValues.push(lat.kde.x[0], lat.kde.x[lat.kde.x.length - 1]);
  }
  return {
    kind: "violin",
    scenario: group[0].scenario,
    payloadBytes: group[0].payload_bytes,
    entries,
    ...logSpan(spanValues),
  };
}

export function buildCdf(sweep: Sweep, group: RunSummary[]): CdfFigure {
  const { present, users } = withGaps(sweep, group);
  const curves: CdfCurve[] = [];
  const missingUsers: number[] = [];
  const spanValues: number[] = [];
  for (const u of users) {
    const run = present.get(u);
    if (!run || !run.valid || !run.ecdf_ms) {
      missingUsers.push(u);
      continue;
    }
    curves.push({ users: u, x: run.ecdf_ms.x, f: run.ecdf_ms.f });
    spanValues.push(run.ecdf_ms.x[0], run.ecdf_ms.x[run.ecdf_ms.x.length - 1]);
  }
  return {
    kind: "cdf",
    scenario: group[0].scenario,
    payloadBytes: group[0].payload_bytes,
    curves,
    missingUsers,
    ...logSpan(spanValues),
  };
}

export function buildResource(
  sweep: Sweep,
  group: RunSummary[],
  component = "combined",
): ResourceFigure {
  const { present, users } = withGaps(sweep, group);
  const rows: ResourceRow[] = [];
  const missingUsers: number[] = [];
  for (const u of users) {
    const run = present.get(u);
    const agg = run?.resources?.[component];
    if (!run || !run.valid || !agg) {
      missingUsers.push(u);
      continue;
    }
    rows.push({
      users: u,
      cpuPct: agg.cpu_pct,
      memBytes: agg.mem_bytes,
      netTotalBytes: agg.net.in_total + agg.net.out_total,
      netPeakRate: agg.net.io_peak_rate,
    });
  }
  return {
    kind: "resource",
    scenario: group[0].scenario,
    payloadBytes: group[0].payload_bytes,
    component,
    rows,
    missingUsers,
  };
}

export function buildAll(
  sweep: Sweep,
  kinds: Array<"violin" | "cdf" | "resource">,
): Figure[] {
  const figures: Figure[] = [];
  for (const group of groupForFigures(sweep).values()) {
    if (kinds.includes("violin")) figures.push(buildViolin(sweep, group));
    if (kinds.includes("cdf")) figures.push(buildCdf(sweep, group));
    if (kinds.includes("resource")) figures.push(buildResource(sweep, group));
  }
  return figures;
}

export function figureHasGaps(figure: Figure): boolean {
  if (figure.kind === "violin") return figure.entries.some((e) => e.missing);
  return figure.missingUsers.length > 0;
}

export function figureBasename(figure: Figure): string {
  return `${figure.scenario}-${figure.payloadBytes}B-${figure.kind}`;
}

/**
 * Figure layouts, drawn once against the Canvas interface so the SVG and
 * PNG backends cannot drift apart. The layout reads model values only;
 * it computes coordinates, never statistics.
 */

import { Canvas } from "./canvas.js";
import { CdfFigure, Figure, ResourceFigure, ViolinFigure } from "./figures.js";

export const WIDTH = 720;
export const HEIGHT = 420;
const MARGIN = { left: 70, right: 100, top: 36, bottom: 46 };
const PLOT_W = WIDTH - MARGIN.left - MARGIN.right;
const PLOT_H = HEIGHT - MARGIN.top - MARGIN.bottom;

export const PALETTE = [
  "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

function fmt(v: number): string {
  return Number.isInteger(v) ? String(v) : String(Math.round(v * 100) / 100);
}

export function latencyTickLabel(ms: number): string {
  if (ms >= 1000) return `${fmt(ms / 1000)}s`;
  if (ms >= 1) return `${fmt(ms)}ms`;
  return `${fmt(ms * 1000)}us`;
}

export function bytesLabel(bytes: number): string {
  if (bytes >= 1 << 30) return `${(bytes / (1 << 30)).toFixed(1)}GB`;
  if (bytes >= 1 << 20) return `${(bytes / (1 << 20)).toFixed(1)}MB`;
  if (bytes >= 1 << 10) return `${(bytes / (1 << 10)).toFixed(1)}KB`;
  return `${bytes}B`;
}

export function decadeTicks(logMin: number, logMax: number): number[] {
  const ticks: number[] = [];
  for (let k = Math.ceil(logMin - 1e-9); k <= Math.floor(logMax + 1e-9); k++) {
    ticks.push(k);
  }
  if (ticks.length === 0) ticks.push(Math.round((logMin + logMax) / 2));
  return ticks;
}

function title(figure: Figure): string {
  return `${figure.scenario} - ${figure.payloadBytes}B payload`;
}

function yLogScale(logMin: number, logMax: number) {
  return (ms: number) =>
    MARGIN.top + PLOT_H - ((Math.log10(ms) - logMin) / (logMax - logMin)) * PLOT_H;
}

function drawLatencyYAxis(c: Canvas, logMin: number, logMax: number): void {
  const toY = yLogScale(logMin, logMax);
  for (const k of decadeTicks(logMin, logMax)) {
    const y = toY(10 ** k);
    c.line(MARGIN.left, y, WIDTH - MARGIN.right, y, "#e6e6e6");
    c.line(MARGIN.left - 4, y, MARGIN.left, y, "#333333");
    c.text(MARGIN.left - 8, y + 4, latencyTickLabel(10 ** k), 11, "end");
  }
  c.line(MARGIN.left, MARGIN.top, MARGIN.left, MARGIN.top + PLOT_H, "#333333");
  c.line(MARGIN.left, MARGIN.top + PLOT_H, WIDTH - MARGIN.right, MARGIN.top + PLOT_H, "#333333");
}

export function drawViolin(c: Canvas, figure: ViolinFigure): void {
  c.text(WIDTH / 2, 20, `${title(figure)} - latency violins`, 14, "middle");
  drawLatencyYAxis(c, figure.logMin, figure.logMax);
  const toY = yLogScale(figure.logMin, figure.logMax);
  const slotW = PLOT_W / Math.max(figure.entries.length, 1);
  const halfW = slotW * 0.38;

  figure.entries.forEach((entry, i) => {
    const cx = MARGIN.left + slotW * (i + 0.5);
    c.text(cx, MARGIN.top + PLOT_H + 16, String(entry.users), 11, "middle");
    if (entry.missing) {
      c.text(cx, MARGIN.top + PLOT_H / 2, "missing", 11, "middle", "#cc0000");
      return;
    }
    const peak = Math.max(...entry.kdeY, 1e-12);
    const right: Array<[number, number]> = [];
    const left: Array<[number, number]> = [];
    for (let j = 0; j < entry.kdeX.length; j++) {
      const y = toY(entry.kdeX[j]);
      const dx = (entry.kdeY[j] / peak) * halfW;
      right.push([cx + dx, y]);
      left.push([cx - dx, y]);
    }
    c.polygon(right.concat(left.reverse()), PALETTE[i % PALETTE.length], 0.55);
    c.line(cx, toY(entry.min), cx, toY(entry.max), "#333333", 1);
    const boxTop = toY(entry.p75);
    c.rect(cx - 3, boxTop, 6, toY(entry.p25) - boxTop, "#333333");
    c.circle(cx, toY(entry.median), 3, "#ffffff");
  });
  c.text(WIDTH / 2, HEIGHT - 10, "concurrent users", 12, "middle");
  c.text(14, MARGIN.top - 10, "latency (log)", 11, "start");
}

export function drawCdf(c: Canvas, figure: CdfFigure): void {
  c.text(WIDTH / 2, 20, `${title(figure)} - latency CDF`, 14, "middle");
  const toX = (ms: number) =>
    MARGIN.left + ((Math.log10(ms) - figure.logMin) / (figure.logMax - figure.logMin)) * PLOT_W;
  const toY = (f: number) => MARGIN.top + PLOT_H - f * PLOT_H;

  for (const f of [0, 0.25, 0.5, 0.75, 1.0]) {
    c.line(MARGIN.left, toY(f), WIDTH - MARGIN.right, toY(f), "#e6e6e6");
    c.text(MARGIN.left - 8, toY(f) + 4, f.toFixed(2), 11, "end");
  }
  c.line(MARGIN.left, MARGIN.top, MARGIN.left, MARGIN.top + PLOT_H, "#333333");
  c.line(MARGIN.left, MARGIN.top + PLOT_H, WIDTH - MARGIN.right, MARGIN.top + PLOT_H, "#333333");
  for (const k of decadeTicks(figure.logMin, figure.logMax)) {
    const x = toX(10 ** k);
    c.line(x, MARGIN.top + PLOT_H, x, MARGIN.top + PLOT_H + 4, "#333333");
    c.text(x, MARGIN.top + PLOT_H + 16, latencyTickLabel(10 ** k), 11, "middle");
  }

  figure.curves.forEach((curve, i) => {
    const color = PALETTE[i % PALETTE.length];
    const points: Array<[number, number]> = curve.x.map((ms, j) => [
      toX(Math.max(ms, 10 ** figure.logMin)),
      toY(curve.f[j]),
    ]);
    c.polyline(points, color, 1.5);
    c.text(WIDTH - MARGIN.right + 6, toY(curve.f[curve.f.length - 1]) + 4 + i * 12,
      `${curve.users} users`, 10, "start", color);
  });
  figure.missingUsers.forEach((users, i) => {
    c.text(MARGIN.left + 8, MARGIN.top + 14 + i * 14, `${users} users: missing`, 11, "start", "#cc0000");
  });
  c.text(WIDTH / 2, HEIGHT - 10, "latency (log)", 12, "middle");
}

export function drawResource(c: Canvas, figure: ResourceFigure): void {
  c.text(WIDTH / 2, 20, `${title(figure)} - resources [${figure.component}]`, 14, "middle");
  const panels: Array<{
    label: string;
    stat: (row: ResourceRowLike) => { mean: number; min: number; max: number };
    format: (v: number) => string;
  }> = [
    { label: "cpu %", stat: (row) => row.cpuPct, format: (v) => String(Math.round(v)) },
    { label: "memory", stat: (row) => row.memBytes, format: bytesLabel },
    {
      label: "net I/O total",
      stat: (row) => ({ mean: row.netTotalBytes, min: row.netTotalBytes, max: row.netTotalBytes }),
      format: bytesLabel,
    },
  ];
  const panelW = (WIDTH - MARGIN.left - 20) / panels.length;
  panels.forEach((panel, p) => {
    const x0 = MARGIN.left + p * panelW + 14;
    const w = panelW - 42;
    const top = MARGIN.top + 14;
    const h = PLOT_H - 26;
    const maxVal = Math.max(1e-9, ...figure.rows.map((row) => panel.stat(row).max));
    const toY = (v: number) => top + h - (v / maxVal) * h;
    c.line(x0 - 6, top, x0 - 6, top + h, "#333333");
    c.line(x0 - 6, top + h, x0 + w, top + h, "#333333");
    c.text(x0 + w / 2, top - 4, panel.label, 11, "middle");
    c.text(x0 - 4, top + 8, panel.format(maxVal), 9, "start", "#777777");
    const slots = figure.rows.length + figure.missingUsers.length;
    const slot = w / Math.max(slots, 1);
    let i = 0;
    for (const row of figure.rows) {
      const { mean, min, max } = panel.stat(row);
      const cx = x0 + slot * (i + 0.5);
      c.rect(cx - slot * 0.3, toY(mean), slot * 0.6, top + h - toY(mean), PALETTE[p]);
      c.line(cx, toY(min), cx, toY(max), "#333333", 1);
      c.line(cx - 4, toY(min), cx + 4, toY(min), "#333333", 1);
      c.line(cx - 4, toY(max), cx + 4, toY(max), "#333333", 1);
      c.text(cx, top + h + 12, String(row.users), 9, "middle");
      i++;
    }
    for (const users of figure.missingUsers) {
      const cx = x0 + slot * (i + 0.5);
      c.text(cx, top + h / 2, "missing", 9, "middle", "#cc0000");
      c.text(cx, top + h + 12, String(users), 9, "middle");
      i++;
    }
  });
  c.text(WIDTH / 2, HEIGHT - 10, "concurrent users", 12, "middle");
}

interface ResourceRowLike {
  cpuPct: { mean: number; min: number; max: number };
  memBytes: { mean: number; min: number; max: number };
  netTotalBytes: number;
}

export function drawFigure(c: Canvas, figure: Figure): void {
  switch (figure.kind) {
    case "violin":
      return drawViolin(c, figure);
    case "cdf":
      return drawCdf(c, figure);
    case "resource":
      return drawResource(c, figure);
  }
}

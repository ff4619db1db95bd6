#!/usr/bin/env node
/**
 * edgebench-plots — render violin / CDF / resource figures from a run or
 * sweep output directory produced by the benchmark harness.
 *
 *   edgebench-plots --dir <outdir> [--fig violin|cdf|resource|all] [--out <dir>]
 *
 * Emits one SVG and one PNG per (scenario, payload, figure kind). Missing
 * or invalid runs leave labelled gaps, print a warning, and make the exit
 * code 2; figures render from reduced artifacts only.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { parseArgs } from "node:util";

import { loadSweep } from "./artifacts.js";
import { buildAll, figureBasename, figureHasGaps } from "./figures.js";
import { renderPng } from "./png.js";
import { renderSvg } from "./svg.js";

const FIG_KINDS = ["violin", "cdf", "resource"] as const;
type FigKind = (typeof FIG_KINDS)[number];

export function main(argv: string[]): number {
  let args;
  try {
    args = parseArgs({
      args: argv,
      options: {
        dir: { type: "string" },
        fig: { type: "string", default: "all" },
        out: { type: "string" },
      },
    }).values;
  } catch (err) {
    console.error(String(err));
    return 1;
  }
  if (!args.dir) {
    console.error("usage: edgebench-plots --dir <outdir> [--fig violin|cdf|resource|all] [--out <dir>]");
    return 1;
  }
  const kinds: FigKind[] =
    args.fig === "all" ? [...FIG_KINDS] : [args.fig as FigKind];
  if (!kinds.every((k) => (FIG_KINDS as readonly string[]).includes(k))) {
    console.error(`unknown --fig ${args.fig}; expected one of ${FIG_KINDS.join("|")} or all`);
    return 1;
  }

  const sweep = loadSweep(args.dir);
  for (const warning of sweep.warnings) {
    console.error(`warning: ${warning}`);
  }
  if (sweep.runs.length === 0) {
    console.error(`error: no runs with summaries under ${args.dir}`);
    return 1;
  }

  const outDir = args.out ?? path.join(args.dir, "figures");
  fs.mkdirSync(outDir, { recursive: true });

  let gaps = sweep.warnings.length > 0;
  const figures = buildAll(sweep, kinds);
  for (const figure of figures) {
    const base = path.join(outDir, figureBasename(figure));
    fs.writeFileSync(`${base}.svg`, renderSvg(figure));
    fs.writeFileSync(`${base}.png`, renderPng(figure));
    if (figureHasGaps(figure)) {
      gaps = true;
      console.error(`warning: ${figureBasename(figure)} rendered with missing runs`);
    }
    console.log(`wrote ${base}.svg ${base}.png`);
  }
  return gaps ? 2 : 0;
}

const invokedDirectly =
  process.argv[1] && path.resolve(process.argv[1]) === new URL(import.meta.url).pathname;
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}

/** PNG backend: rasterizes the shared layout with the built-in canvas. */

import { Anchor, Canvas } from "./canvas.js";
import { Figure } from "./figures.js";
import { HEIGHT, WIDTH, drawFigure } from "./layout.js";
import { Color, Raster, hexColor } from "./raster.js";

export class RasterCanvas implements Canvas {
  readonly raster: Raster;

  constructor(width = WIDTH, height = HEIGHT) {
    this.raster = new Raster(width, height);
  }

  private color(hex: string, opacity = 1): Color {
    return hexColor(hex, Math.round(opacity * 255));
  }

  line(x1: number, y1: number, x2: number, y2: number, color: string, width = 1): void {
    this.raster.drawLine(x1, y1, x2, y2, this.color(color), Math.max(1, Math.round(width)));
  }

  rect(x: number, y: number, w: number, h: number, color: string): void {
    this.raster.fillRect(x, y, w, h, this.color(color));
  }

  circle(cx: number, cy: number, radius: number, color: string): void {
    const fill = this.color(color);
    for (let dy = -radius; dy <= radius; dy++) {
      for (let dx = -radius; dx <= radius; dx++) {
        if (dx * dx + dy * dy <= radius * radius) {
          this.raster.blend(cx + dx, cy + dy, fill);
        }
      }
    }
  }

  polygon(points: Array<[number, number]>, color: string, opacity = 1): void {
    this.raster.fillPolygon(points, this.color(color, opacity));
  }

  polyline(points: Array<[number, number]>, color: string, width = 1.5): void {
    this.raster.polyline(points, this.color(color), Math.max(1, Math.round(width)));
  }

  text(x: number, y: number, content: string, size = 11, anchor: Anchor = "start",
       color = "#333333"): void {
    this.raster.drawText(x, y, content, this.color(color), anchor, size >= 14 ? 2 : 1);
  }
}

export function renderPng(figure: Figure): Buffer {
  const canvas = new RasterCanvas();
  drawFigure(canvas, figure);
  return canvas.raster.toPng();
}

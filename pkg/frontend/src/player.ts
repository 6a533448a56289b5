/**
 * Slice-neighborhood playback: cycles the 21 frames of a region the way
 * an animated loop would, with manual stepping and play/pause.
 */

import type { PanelVariant, RegionView } from "./api.js";

export const FRAME_INTERVAL_MS = 150;

export interface PanelElements {
  left: HTMLImageElement;
  right: HTMLImageElement;
  superimposed: HTMLImageElement;
}

export interface PlayerOptions {
  /** Maps a server-relative frame path to a loadable URL. */
  resolveUrl?: (path: string) => string;
  /** Called after every rendered frame with the current slice offset. */
  onFrame?: (offset: number) => void;
  intervalMs?: number;
}

export class FramePlayer {
  private index: number;
  private timer: ReturnType<typeof setInterval> | null = null;
  private readonly resolveUrl: (path: string) => string;
  private readonly onFrame: (offset: number) => void;
  private readonly intervalMs: number;

  constructor(
    private readonly view: RegionView,
    private readonly panels: PanelElements,
    options: PlayerOptions = {},
  ) {
    const count = view.offsets.length;
    for (const variant of Object.keys(view.frames) as PanelVariant[]) {
      if (view.frames[variant].length !== count) {
        throw new Error(
          `variant ${variant} has ${view.frames[variant].length} frames, expected ${count}`,
        );
      }
    }
    this.resolveUrl = options.resolveUrl ?? ((path) => path);
    this.onFrame = options.onFrame ?? (() => {});
    this.intervalMs = options.intervalMs ?? FRAME_INTERVAL_MS;
    this.index = Math.floor(count / 2); // start on the region's own slice
    this.render();
  }

  get frameCount(): number {
    return this.view.offsets.length;
  }

  get currentOffset(): number {
    return this.view.offsets[this.index];
  }

  get playing(): boolean {
    return this.timer !== null;
  }

  step(delta: number): void {
    const n = this.frameCount;
    this.index = (((this.index + delta) % n) + n) % n;
    this.render();
  }

  play(): void {
    if (this.timer !== null) {
      return;
    }
    this.timer = setInterval(() => this.step(1), this.intervalMs);
  }

  pause(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  togglePlay(): void {
    if (this.playing) {
      this.pause();
    } else {
      this.play();
    }
  }

  dispose(): void {
    this.pause();
  }

  private variantFor(side: "left" | "right"): PanelVariant {
    return this.view.panel_order[side === "left" ? 0 : 1];
  }

  private render(): void {
    this.panels.left.src = this.resolveUrl(
      this.view.frames[this.variantFor("left")][this.index],
    );
    this.panels.right.src = this.resolveUrl(
      this.view.frames[this.variantFor("right")][this.index],
    );
    this.panels.superimposed.src = this.resolveUrl(
      this.view.frames.superimposed[this.index],
    );
    this.onFrame(this.currentOffset);
  }
}

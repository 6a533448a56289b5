/**
 * Review-loop orchestration: fetch the next ungraded region, animate its
 * frames, capture the grade, submit, advance. Resumes from server-side
 * progress after a reload; an unsent grade survives network failures in
 * local storage. All statistics stay on the server.
 */

import {
  ApiError,
  GRADE_CATEGORIES,
  type GradeCategory,
  type RegionView,
  type SessionApi,
} from "./api.js";
import {
  categoryForSlot,
  categoryLabel,
  emptyGrade,
  toWireGrade,
  validateGrade,
  type GradeInput,
} from "./grade.js";
import { bindKeys } from "./keyboard.js";
import { FramePlayer, type PanelElements } from "./player.js";
import { progressLine, renderBlindedSummary, renderUnblindedSummary } from "./summary.js";

const DRAFT_PREFIX = "grading-draft:";

const TEMPLATE = `
  <header>
    <span class="progress"></span>
  </header>
  <section class="viewer" hidden>
    <h2 class="region-title"></h2>
    <div class="panels">
      <figure>
        <img class="panel-left" alt="left panel" />
        <figcaption class="caption-left"></figcaption>
      </figure>
      <figure>
        <img class="panel-right" alt="right panel" />
        <figcaption class="caption-right"></figcaption>
      </figure>
      <figure>
        <img class="panel-superimposed" alt="both contours" />
        <figcaption>superimposed</figcaption>
      </figure>
    </div>
    <p class="slice-label"></p>
    <p class="hint">space: play/pause &middot; arrows: step &middot; 1-5: grade &middot; U: ungradable &middot; Enter: submit</p>
  </section>
  <section class="grade-form" hidden>
    <div class="categories"></div>
    <label class="accurate-row">
      <input type="checkbox" class="accurate" checked />
      at least one contour is accurate
    </label>
    <button type="button" class="ungradable">mark ungradable (U)</button>
    <button type="button" class="submit">submit grade (Enter)</button>
    <p class="status" role="alert"></p>
  </section>
  <section class="done" hidden>
    <h2>all regions graded</h2>
    <p class="blinded-summary"></p>
    <button type="button" class="reveal">show summary (needs server authorization)</button>
    <div class="summary-table"></div>
  </section>
`;

interface AppElements {
  progress: HTMLElement;
  viewer: HTMLElement;
  regionTitle: HTMLElement;
  panels: PanelElements;
  captionLeft: HTMLElement;
  captionRight: HTMLElement;
  sliceLabel: HTMLElement;
  form: HTMLElement;
  categories: HTMLElement;
  accurate: HTMLInputElement;
  ungradable: HTMLButtonElement;
  submit: HTMLButtonElement;
  status: HTMLElement;
  done: HTMLElement;
  blindedSummary: HTMLElement;
  reveal: HTMLButtonElement;
  summaryTable: HTMLElement;
}

function pick<T extends Element>(root: HTMLElement, selector: string): T {
  const el = root.querySelector(selector);
  if (!el) {
    throw new Error(`template is missing ${selector}`);
  }
  return el as T;
}

function defaultStorage(): Storage | null {
  try {
    return globalThis.localStorage ?? null;
  } catch {
    return null;
  }
}

export class GradingApp {
  private els!: AppElements;
  private player: FramePlayer | null = null;
  private grade: GradeInput = emptyGrade();
  private view: RegionView | null = null;
  private unbindKeys: (() => void) | null = null;
  private submitting = false;

  constructor(
    private readonly api: SessionApi,
    private readonly root: HTMLElement,
    private readonly storage: Storage | null = defaultStorage(),
  ) {}

  async start(): Promise<void> {
    this.mount();
    this.unbindKeys = bindKeys(this.root.ownerDocument, {
      togglePlay: () => this.player?.togglePlay(),
      step: (delta) => {
        this.player?.pause();
        this.player?.step(delta);
      },
      selectCategory: (slot) => this.selectCategory(slot),
      toggleUngradable: () => this.toggleUngradable(),
      submit: () => {
        void this.submit();
      },
    });
    await this.refreshProgress();
    await this.advance();
  }

  stop(): void {
    this.player?.dispose();
    this.player = null;
    this.unbindKeys?.();
    this.unbindKeys = null;
  }

  /** Region currently on screen, for tests and debugging. */
  get currentRegionId(): string | null {
    return this.view?.region_id ?? null;
  }

  private mount(): void {
    this.root.innerHTML = TEMPLATE;
    this.els = {
      progress: pick(this.root, ".progress"),
      viewer: pick(this.root, ".viewer"),
      regionTitle: pick(this.root, ".region-title"),
      panels: {
        left: pick<HTMLImageElement>(this.root, ".panel-left"),
        right: pick<HTMLImageElement>(this.root, ".panel-right"),
        superimposed: pick<HTMLImageElement>(this.root, ".panel-superimposed"),
      },
      captionLeft: pick(this.root, ".caption-left"),
      captionRight: pick(this.root, ".caption-right"),
      sliceLabel: pick(this.root, ".slice-label"),
      form: pick(this.root, ".grade-form"),
      categories: pick(this.root, ".categories"),
      accurate: pick<HTMLInputElement>(this.root, ".accurate"),
      ungradable: pick<HTMLButtonElement>(this.root, ".ungradable"),
      submit: pick<HTMLButtonElement>(this.root, ".submit"),
      status: pick(this.root, ".status"),
      done: pick(this.root, ".done"),
      blindedSummary: pick(this.root, ".blinded-summary"),
      reveal: pick<HTMLButtonElement>(this.root, ".reveal"),
      summaryTable: pick(this.root, ".summary-table"),
    };

    const doc = this.root.ownerDocument;
    GRADE_CATEGORIES.forEach((category, i) => {
      const button = doc.createElement("button");
      button.type = "button";
      button.className = "category";
      button.dataset.category = category;
      button.textContent = `${i + 1}: ${categoryLabel(category)}`;
      button.addEventListener("click", () => this.selectCategory(i + 1));
      this.els.categories.appendChild(button);
    });
    this.els.ungradable.addEventListener("click", () => this.toggleUngradable());
    this.els.submit.addEventListener("click", () => void this.submit());
    this.els.accurate.addEventListener("change", () => {
      this.grade.atLeastOneAccurate = this.els.accurate.checked;
      this.saveDraft();
    });
    this.els.reveal.addEventListener("click", () => void this.reveal());
  }

  private async refreshProgress(): Promise<void> {
    const info = await this.api.session();
    this.els.progress.textContent = progressLine(info);
  }

  private async advance(): Promise<void> {
    this.player?.dispose();
    this.player = null;
    this.view = null;

    const regionId = await this.api.nextRegion();
    if (regionId === null) {
      await this.showDone();
      return;
    }
    const view = await this.api.regionFrames(regionId);
    this.view = view;
    this.grade = this.loadDraft(regionId) ?? emptyGrade();

    this.els.done.hidden = true;
    this.els.viewer.hidden = false;
    this.els.form.hidden = false;
    this.els.viewer.dataset.regionId = view.region_id;
    this.els.regionTitle.textContent =
      `region ${view.region_id} (slice ${view.slice_index}, ${view.side} side, ` +
      `${view.window_mm} mm window)`;
    this.els.captionLeft.textContent = view.panel_order[0];
    this.els.captionRight.textContent = view.panel_order[1];

    this.player = new FramePlayer(view, this.els.panels, {
      resolveUrl: (path) => this.api.url(path),
      onFrame: (offset) => {
        this.els.sliceLabel.textContent =
          `slice offset ${offset >= 0 ? "+" : ""}${offset}`;
      },
    });
    this.player.play();
    this.renderGradeState();
    this.setStatus("");
  }

  private selectCategory(slot: number): void {
    const category = categoryForSlot(slot);
    if (category === null || this.view === null) {
      return;
    }
    this.grade.gradable = true;
    this.grade.category = category;
    this.saveDraft();
    this.renderGradeState();
  }

  private toggleUngradable(): void {
    if (this.view === null) {
      return;
    }
    this.grade.gradable = !this.grade.gradable;
    if (!this.grade.gradable) {
      this.grade.category = null;
    }
    this.saveDraft();
    this.renderGradeState();
  }

  private async submit(): Promise<void> {
    if (this.view === null || this.submitting) {
      return;
    }
    const problem = validateGrade(this.grade);
    if (problem !== null) {
      this.setStatus(problem);
      return;
    }
    this.submitting = true;
    const regionId = this.view.region_id;
    try {
      await this.api.submitGrade(regionId, toWireGrade(this.grade));
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // idempotent session: the region is already recorded server-side
        this.clearDraft(regionId);
      } else {
        const reason = err instanceof Error ? err.message : String(err);
        this.saveDraft();
        this.setStatus(
          `submission failed (${reason}); the grade is kept locally - press Enter to retry`,
        );
        this.submitting = false;
        return;
      }
    }
    this.clearDraft(regionId);
    this.submitting = false;
    await this.refreshProgress();
    await this.advance();
  }

  private async showDone(): Promise<void> {
    this.els.viewer.hidden = true;
    this.els.form.hidden = true;
    this.els.done.hidden = false;
    delete this.els.viewer.dataset.regionId;
    renderBlindedSummary(await this.api.blindedSummary(), this.els.blindedSummary);
  }

  private async reveal(): Promise<void> {
    const result = await this.api.unblindedSummary();
    if (!result.authorized) {
      this.els.summaryTable.textContent = `not authorized: ${result.reason}`;
      return;
    }
    renderUnblindedSummary(result.summary, this.els.summaryTable);
  }

  private renderGradeState(): void {
    const buttons = this.els.categories.querySelectorAll<HTMLButtonElement>(
      "button.category",
    );
    buttons.forEach((button) => {
      const selected =
        this.grade.gradable && button.dataset.category === this.grade.category;
      button.classList.toggle("selected", selected);
    });
    this.els.ungradable.classList.toggle("selected", !this.grade.gradable);
    this.els.accurate.checked = this.grade.atLeastOneAccurate;
  }

  private setStatus(message: string): void {
    this.els.status.textContent = message;
  }

  private draftKey(regionId: string): string {
    return DRAFT_PREFIX + regionId;
  }

  private saveDraft(): void {
    if (this.storage === null || this.view === null) {
      return;
    }
    this.storage.setItem(
      this.draftKey(this.view.region_id),
      JSON.stringify(this.grade),
    );
  }

  private loadDraft(regionId: string): GradeInput | null {
    if (this.storage === null) {
      return null;
    }
    const raw = this.storage.getItem(this.draftKey(regionId));
    if (raw === null) {
      return null;
    }
    try {
      const parsed = JSON.parse(raw) as Partial<GradeInput>;
      const category =
        typeof parsed.category === "string" &&
        (GRADE_CATEGORIES as readonly string[]).includes(parsed.category)
          ? (parsed.category as GradeCategory)
          : null;
      return {
        category,
        gradable: parsed.gradable !== false,
        atLeastOneAccurate: parsed.atLeastOneAccurate !== false,
      };
    } catch {
      return null;
    }
  }

  private clearDraft(regionId: string): void {
    this.storage?.removeItem(this.draftKey(regionId));
  }
}

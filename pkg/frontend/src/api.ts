/**
 * Typed client for the grading-session HTTP+JSON service.
 *
 * Every method maps to exactly one endpoint; the client carries no
 * state beyond the base URL and never requests the blinding key.
 */

export type PanelColor = "blue" | "red";
export type PanelVariant = "plain" | "blue" | "red" | "superimposed";

export const GRADE_CATEGORIES = [
  "blue_substantially_better",
  "blue_slightly_better",
  "equal",
  "red_slightly_better",
  "red_substantially_better",
] as const;

export type GradeCategory = (typeof GRADE_CATEGORIES)[number];

export interface SessionProgress {
  regions: number;
  graded: number;
  ungradable: number;
  pending: number;
}

export interface SessionInfo extends SessionProgress {
  region_ids: string[];
}

export interface RegionView {
  region_id: string;
  slice_index: number;
  side: string;
  window_mm: number;
  offsets: number[];
  panel_order: [PanelColor, PanelColor];
  frames: Record<PanelVariant, string[]>;
}

export interface WireGrade {
  grade: GradeCategory | null;
  gradable: boolean;
  at_least_one_accurate: boolean;
  overwrite?: boolean;
}

export interface SubsetSummary {
  n_regions: number;
  counts: Record<string, number>;
  wilcoxon_z: number | null;
  wilcoxon_p: number | null;
  wilcoxon_error: string | null;
}

export interface UnblindedSummary {
  n_regions: number;
  n_graded: number;
  ungradable: number;
  both_inaccurate: number;
  ungraded: number;
  partial: boolean;
  subsets: Record<string, SubsetSummary>;
}

export type UnblindResult =
  | { authorized: true; summary: UnblindedSummary }
  | { authorized: false; reason: string };

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export class SessionApi {
  constructor(
    private readonly base: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  /** Absolute URL for a server path (frame URLs arrive server-relative). */
  url(path: string): string {
    return this.base.replace(/\/+$/, "") + path;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.url(path), init);
    const body: unknown = await response.json();
    if (!response.ok) {
      const reason =
        typeof body === "object" && body !== null && "error" in body
          ? String((body as { error: unknown }).error)
          : `HTTP ${response.status}`;
      throw new ApiError(response.status, reason);
    }
    return body as T;
  }

  session(): Promise<SessionInfo> {
    return this.json<SessionInfo>("/session");
  }

  async nextRegion(): Promise<string | null> {
    const body = await this.json<{ region_id: string | null }>("/regions/next");
    return body.region_id;
  }

  regionFrames(regionId: string): Promise<RegionView> {
    return this.json<RegionView>(
      `/regions/${encodeURIComponent(regionId)}/frames`,
    );
  }

  submitGrade(regionId: string, payload: WireGrade): Promise<{ accepted: boolean }> {
    return this.json(`/regions/${encodeURIComponent(regionId)}/grade`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  blindedSummary(): Promise<SessionProgress> {
    return this.json<SessionProgress>("/summary");
  }

  /** The unblinded table; the server refuses unless it holds the key. */
  async unblindedSummary(): Promise<UnblindResult> {
    try {
      const summary = await this.json<UnblindedSummary>("/summary?unblind=true");
      return { authorized: true, summary };
    } catch (err) {
      if (err instanceof ApiError && err.status === 403) {
        return { authorized: false, reason: err.message };
      }
      throw err;
    }
  }
}

/**
 * Progress and summary rendering. Every number and test statistic is
 * printed exactly as the server returned it — this module computes
 * nothing and never sees the blinding key.
 */

import type { SessionProgress, SubsetSummary, UnblindedSummary } from "./api.js";

export function progressLine(progress: SessionProgress): string {
  return (
    `graded ${progress.graded} of ${progress.regions} regions ` +
    `(${progress.ungradable} ungradable, ${progress.pending} pending)`
  );
}

export function renderBlindedSummary(
  progress: SessionProgress,
  el: HTMLElement,
): void {
  el.textContent = progressLine(progress);
}

function statisticText(subset: SubsetSummary): string {
  if (subset.wilcoxon_error !== null) {
    return subset.wilcoxon_error;
  }
  return `z=${String(subset.wilcoxon_z)}, p=${String(subset.wilcoxon_p)}`;
}

export function renderUnblindedSummary(
  summary: UnblindedSummary,
  el: HTMLElement,
): void {
  el.textContent = "";
  if (summary.n_graded === 0) {
    el.textContent = "no grades recorded yet";
    return;
  }
  const doc = el.ownerDocument;
  const head = doc.createElement("p");
  head.textContent =
    `${summary.n_graded} of ${summary.n_regions} graded; ` +
    `${summary.ungradable} ungradable, ${summary.both_inaccurate} flagged ` +
    `neither-accurate, ${summary.ungraded} remaining` +
    (summary.partial ? " (partial session)" : "");
  el.appendChild(head);

  const subsetNames = Object.keys(summary.subsets);
  const first = summary.subsets[subsetNames[0]];
  const categories = Object.keys(first.counts);

  const table = doc.createElement("table");
  const headerRow = doc.createElement("tr");
  for (const text of ["subset", "regions", ...categories, "signed-rank"]) {
    const th = doc.createElement("th");
    th.textContent = text.replace(/_/g, " ");
    headerRow.appendChild(th);
  }
  table.appendChild(headerRow);

  for (const name of subsetNames) {
    const subset = summary.subsets[name];
    const row = doc.createElement("tr");
    const cells = [
      name.replace(/_/g, " "),
      String(subset.n_regions),
      ...categories.map((category) => String(subset.counts[category])),
      statisticText(subset),
    ];
    for (const text of cells) {
      const td = doc.createElement("td");
      td.textContent = text;
      row.appendChild(td);
    }
    table.appendChild(row);
  }
  el.appendChild(table);
}

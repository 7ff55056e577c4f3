from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="sourcecv",
    version="0.1.0",
    author="SourceCV Team",
    description="Reliability of cross-validation estimates on unseen ECG data sources",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "examples"]),
    package_data={"src": ["data/v1/*.csv"]},
    include_package_data=True,
    classifiers=[
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.23",
        "scipy>=1.9",
        "neurokit2>=0.2.7",
        "pandas>=1.5",
        "scikit-learn>=1.1",
        "joblib>=1.2",
        "PyYAML>=6.0",
        "streamlit>=1.28.0",
    ],
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={"console_scripts": ["sourcecv=src.cli:main"]},
)
